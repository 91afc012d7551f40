"""Saliency-routed token-relation distillation at desk scale."""
import os as _os

# RELROUTE_THREADS pins BLAS thread pools; must run before numpy loads.
_threads = _os.environ.get("RELROUTE_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
