"""Certified bound-tightening training and verification for counting CNNs."""

import os as _os

# BTN_THREADS caps BLAS worker threads; it must be set before numpy loads.
if _os.environ.get("BTN_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["BTN_THREADS"])

__version__ = "0.1.0"
