import json
import shutil
from importlib import resources

import pandas as pd
import pytest
import yaml

from akitraj.cli import main
from akitraj.config import ConfigError, load_config
from akitraj.pipeline import PipelineError, run_outcomes, run_phenotype
from akitraj.report import GROUPINGS, require_converged, run_stats
from akitraj.stats import NonConvergenceError
from akitraj.synth import GeneratorConfig, generate_to_dir
from cdm import adult, write_cdm


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    generate_to_dir(GeneratorConfig(seed=2, n=1000, prevalence=(0.6, 0.2, 0.1, 0.1)), root / "in")
    return root / "in"


@pytest.fixture(scope="module")
def phenotype_run(synth_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "out"
    manifest = run_phenotype(load_config(None, synth_dir), out, 1)
    return out, manifest


def _read_json(path):
    return json.loads(path.read_text())


def test_thousand_rows_and_manifest(phenotype_run):
    out, manifest = phenotype_run
    assert len(pd.read_csv(out / "phenotype.csv")) == 1000
    assert len(pd.read_csv(out / "outcomes.csv")) == 1000
    on_disk = _read_json(out / "manifest.json")
    assert on_disk == manifest
    for key in ("config_hash", "inputs", "codemap", "counts", "outputs", "manifest_hash"):
        assert key in manifest
    counts = manifest["counts"]
    assert counts["encounters_loaded"] == counts["encounters_phenotyped"] + counts["encounters_excluded"]
    assert sum(counts["trajectory_groups"].values()) == counts["encounters_phenotyped"]
    tally = _read_json(out / "exclusions.json")
    assert tally["included"] + sum(tally["excluded"].values()) == tally["loaded"]


def test_rerun_and_thread_count_give_identical_bytes(synth_dir, phenotype_run, tmp_path):
    out, manifest = phenotype_run
    cfg = load_config(None, synth_dir)
    again = run_phenotype(cfg, tmp_path / "again", 1)
    threaded = run_phenotype(cfg, tmp_path / "threaded", 4)
    assert again["outputs"] == manifest["outputs"] == threaded["outputs"]
    assert again["manifest_hash"] == manifest["manifest_hash"] == threaded["manifest_hash"]
    for name in manifest["outputs"]:
        assert (tmp_path / "threaded" / name).read_bytes() == (out / name).read_bytes()


def test_manifest_hash_tracks_inputs_config_and_codemap(synth_dir, phenotype_run, tmp_path):
    base = phenotype_run[1]["manifest_hash"]
    cfg_path = tmp_path / "run.yaml"
    cfg_path.write_text(yaml.safe_dump({"engine": {"rapid_reversal_hours": 72}}))
    changed_cfg = run_phenotype(load_config(cfg_path, synth_dir), tmp_path / "cfg", 1)
    assert changed_cfg["manifest_hash"] != base

    codemap = yaml.safe_load(resources.files("akitraj").joinpath("data/codemap_default.yaml").read_text())
    codemap["version"] = "local-test"
    (tmp_path / "cm.yaml").write_text(yaml.safe_dump(codemap))
    cfg_path.write_text(yaml.safe_dump({"codemap": str(tmp_path / "cm.yaml")}))
    changed_cm = run_phenotype(load_config(cfg_path, synth_dir), tmp_path / "cm", 1)
    assert changed_cm["manifest_hash"] != base
    assert changed_cm["outputs"] == phenotype_run[1]["outputs"]

    copy = tmp_path / "input_copy"
    shutil.copytree(synth_dir, copy)
    with open(copy / "MED_ADMIN.csv", "a") as fh:
        fh.write("P000001,acetaminophen 500 mg,2015-01-01T00:00:00\n")
    changed_in = run_phenotype(load_config(None, copy), tmp_path / "in", 1)
    assert changed_in["manifest_hash"] != base
    same = run_phenotype(load_config(None, shutil.copytree(synth_dir, tmp_path / "plain")), tmp_path / "same", 1)
    assert same["manifest_hash"] == base


def test_outcomes_rerun_with_discharge_anchor(synth_dir, phenotype_run, tmp_path):
    out, _ = phenotype_run
    cfg = load_config(None, synth_dir, {"outcomes.mortality_anchor": "discharge"})
    run_outcomes(cfg, out, tmp_path / "dis", 1)
    a = pd.read_csv(out / "outcomes.csv")
    b = pd.read_csv(tmp_path / "dis" / "outcomes.csv")
    assert a["encounter_id"].tolist() == b["encounter_id"].tolist()
    assert a["hospital_death"].equals(b["hospital_death"])
    assert a["surv_time"].equals(b["surv_time"])
    # a death within 30 days of discharge is within 30 days of admission only for short stays
    assert (b["mortality_30d"].astype(bool) >= a["mortality_30d"].astype(bool)).all()


def test_stats_outputs_partition_and_rerun_identical(phenotype_run, tmp_path):
    out, _ = phenotype_run
    cfg = load_config(None)
    m1 = run_stats(cfg, out, tmp_path / "s1")
    m2 = run_stats(cfg, out, tmp_path / "s2")
    assert m1["outputs"] == m2["outputs"]
    n = m1["counts"]["cohort_n"]
    icu_n = 0
    for g in GROUPINGS:
        table = pd.read_csv(tmp_path / "s1" / f"table_{g}.csv", dtype=str, keep_default_na=False)
        ns = table.iloc[0, 1:-1].astype(int)
        if g in ("icu", "non_icu"):
            icu_n += ns.sum()
        else:
            assert ns.sum() == n
    assert icu_n == n
    sub = pd.read_csv(tmp_path / "s1" / "table_subphenotype.csv")
    assert len(sub.columns) == 1 + 7 + 1  # six AKI cells plus no-AKI
    models = _read_json(tmp_path / "s1" / "models.json")
    assert len(models) == 24
    km = pd.read_csv(tmp_path / "s1" / "km_ipw.csv")
    assert set(km["group"]) <= {"no-AKI", "rapidly-reversed", "persistent-with-recovery",
                                "persistent-without-recovery"}


def test_require_converged():
    manifest = {"counts": {"non_converged": ["logistic-icu-C"], "failed": []}}
    require_converged(manifest, ["cox-all-A"])
    with pytest.raises(NonConvergenceError):
        require_converged(manifest, ["logistic-icu-C"])


def test_non_empty_output_dir_rejected(synth_dir, phenotype_run):
    with pytest.raises(PipelineError) as err:
        run_phenotype(load_config(None, synth_dir), phenotype_run[0], 1)
    assert err.value.exit_code == 2


def test_config_errors():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/run.yaml")
    with pytest.raises(ConfigError):
        load_config(None, ".", {"stats.ties": "exact"})


# -- command line -------------------------------------------------------------------

def _stderr_json(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_cli_missing_config_exit_2(synth_dir, tmp_path, capsys):
    code = main(["phenotype", "-c", str(tmp_path / "missing.yaml"), "-i", str(synth_dir), "-o", str(tmp_path / "o")])
    assert code == 2
    assert _stderr_json(capsys)["stage"] == "config"


def test_cli_bad_config_values_exit_2(tmp_path, capsys):
    cfg = tmp_path / "run.yaml"
    cfg.write_text("engine: {stage1_ratio: -1}\n")
    assert main(["validate-config", "-c", str(cfg)]) == 2
    cfg.write_text("synth: {prevalence: [0.5, 0.5, 0.5, 0.5]}\n")
    assert main(["validate-config", "-c", str(cfg)]) == 2
    cfg.write_text("stats: {ties: breslow}\n")
    assert main(["validate-config", "-c", str(cfg)]) == 0
    capsys.readouterr()


def test_cli_data_quality_failure_exit_1(tmp_path, capsys):
    labs = [("P1", 0.9, "mg/dL", "garbage")] * 3 + [("P1", 0.9, "mg/dL", "2020-03-01T09:00:00")]
    root = write_cdm(tmp_path / "in", [adult()], [("E1", "P1", "2020-03-01T08:00:00", "2020-03-03T08:00:00", "HO")],
                     labs)
    assert main(["phenotype", "-i", str(root), "-o", str(tmp_path / "o")]) == 1
    assert _stderr_json(capsys)["stage"] == "ingest"


def test_cli_end_to_end(tmp_path, capsys):
    assert main(["simulate", "-o", str(tmp_path / "in"), "--seed", "4", "-n", "300"]) == 0
    assert main(["phenotype", "-i", str(tmp_path / "in"), "-o", str(tmp_path / "p"), "--threads", "2"]) == 0
    assert main(["outcomes", "-i", str(tmp_path / "in"), "-p", str(tmp_path / "p"), "-o", str(tmp_path / "oc"),
                 "--anchor", "discharge"]) == 0
    assert main(["stats", "-p", str(tmp_path / "p"), "--outcomes", str(tmp_path / "oc"), "-o", str(tmp_path / "s"),
                 "--ties", "breslow", "--model", "cox-all-A"]) == 0
    models = _read_json(tmp_path / "s" / "models.json")
    assert [m["model_id"] for m in models] == ["cox-all-A"]
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["status"] == "ok" and summary["command"] == "stats"
