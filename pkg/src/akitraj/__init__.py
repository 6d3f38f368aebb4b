"""Computable kidney-health phenotype: reference creatinine, KDIGO AKI
staging, trajectory and recovery classification, CKD staging, outcomes
and the survival/regression statistics used to compare groups."""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("akitraj")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"
