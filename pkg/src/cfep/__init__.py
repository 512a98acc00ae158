"""Decentralized expectation propagation for semi-blind channel estimation
in cell-free massive MIMO uplink: message algebra, scenario generation, the
per-AP EP engine, consensus-based belief aggregation and a Monte-Carlo CLI
harness."""

from cfep.kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"
__all__ = ["KERNEL_BACKEND", "__version__"]
