"""Kernel backend selection.

The per-AP data-factor sweep dominates the simulator runtime. A Cython
extension provides the fast path; the pure-numpy module is the fallback
when the extension was not built. Set CFEP_FORCE_NUMPY=1 to force the
fallback (used by the parity tests and the benchmark).
"""

import os

from cfep.kernels import _numpy_kernel

if os.environ.get("CFEP_FORCE_NUMPY"):
    data_factor_sweep = _numpy_kernel.data_factor_sweep
    BACKEND = "numpy"
else:
    try:
        from cfep.kernels._cykernel import data_factor_sweep

        BACKEND = "cython"
    except ImportError:
        data_factor_sweep = _numpy_kernel.data_factor_sweep
        BACKEND = "numpy"

__all__ = ["data_factor_sweep", "BACKEND"]
