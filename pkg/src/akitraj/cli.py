"""Command-line entry point.

Exit codes: 0 success, 1 data-quality failure, 2 configuration error,
3 non-convergence of an explicitly requested model.
"""
from __future__ import annotations

import argparse
import json
import sys

from .config import ConfigError, load_config
from .pipeline import PipelineError, run_outcomes, run_phenotype
from .report import ReportError, model_ids, require_converged, run_stats
from .stats import NonConvergenceError
from .stats.survival import TIES
from .synth import generate_to_dir

EXIT_OK, EXIT_DATA, EXIT_CONFIG, EXIT_CONVERGENCE = 0, 1, 2, 3


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="run configuration (YAML); defaults apply when omitted")
    common.add_argument("--threads", type=int, default=1, help="worker threads (output does not depend on it)")
    common.add_argument("--seed", type=int, help="random seed (synthetic generation)")
    common.add_argument("--anchor", choices=["admission", "discharge"], help="mortality horizon anchor")
    common.add_argument("--ties", choices=list(TIES), help="Cox tie handling")

    p = argparse.ArgumentParser(prog="akitraj", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phenotype", parents=[common], help="ingest, phenotype, features and outcomes")
    ph.add_argument("-i", "--input", required=True, help="directory with the input tables")
    ph.add_argument("-o", "--output", required=True, help="fresh output directory")

    oc = sub.add_parser("outcomes", parents=[common], help="re-derive outcomes for existing phenotype results")
    oc.add_argument("-i", "--input", required=True)
    oc.add_argument("-p", "--phenotype", required=True, help="directory of a phenotype run")
    oc.add_argument("-o", "--output", required=True)

    st = sub.add_parser("stats", parents=[common], help="summary tables, models and KM curves")
    st.add_argument("-p", "--phenotype", "-i", "--input", dest="phenotype", required=True,
                    help="directory of a phenotype run")
    st.add_argument("--outcomes", help="directory of an outcomes run (default: the phenotype run)")
    st.add_argument("-o", "--output", required=True)
    st.add_argument("--model", action="append", choices=model_ids(), metavar="MODEL_ID",
                    help="fit only these models; non-convergence of any of them exits with 3 (repeatable)")

    sm = sub.add_parser("simulate", parents=[common], help="write a synthetic cohort and its ground truth")
    sm.add_argument("-o", "--output", required=True)
    sm.add_argument("-n", type=int, help="number of encounters")

    vc = sub.add_parser("validate-config", parents=[common], help="check a configuration and exit")
    vc.add_argument("-i", "--input", default=".", help="input directory the table paths are relative to")
    return p


def _fail(stage: str, message: str, code: int) -> int:
    print(json.dumps({"status": "error", "stage": stage, "exit_code": code, "error": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.threads < 1:
        return _fail("config", "--threads must be at least 1", EXIT_CONFIG)
    overrides = {"outcomes.mortality_anchor": args.anchor, "stats.ties": args.ties}
    try:
        cfg = load_config(args.config, getattr(args, "input", ".") or ".", overrides)
    except ConfigError as exc:
        return _fail("config", str(exc), EXIT_CONFIG)

    try:
        if args.command == "validate-config":
            manifest = {"config_hash": cfg.digest(), "codemap_version": cfg.codemap.version}
        elif args.command == "phenotype":
            manifest = run_phenotype(cfg, args.output, args.threads)
        elif args.command == "outcomes":
            manifest = run_outcomes(cfg, args.phenotype, args.output, args.threads)
        elif args.command == "stats":
            manifest = run_stats(cfg, args.phenotype, args.output, args.model, args.outcomes)
            if args.model or cfg.strict_models:
                require_converged(manifest, args.model or model_ids())
        else:
            gen = cfg.generator(args.seed, args.n)
            cohort = generate_to_dir(gen, args.output)
            manifest = {"files": cohort.files, "generator": gen.to_dict()}
    except ConfigError as exc:
        return _fail("config", str(exc), EXIT_CONFIG)
    except PipelineError as exc:
        return _fail(exc.stage, str(exc), exc.exit_code)
    except ReportError as exc:
        return _fail("stats", str(exc), EXIT_CONFIG)
    except NonConvergenceError as exc:
        return _fail("stats", str(exc), EXIT_CONVERGENCE)
    summary = {"status": "ok", "command": args.command}
    for key in ("manifest_hash", "config_hash", "counts", "files"):
        if key in manifest:
            summary[key] = manifest[key]
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
