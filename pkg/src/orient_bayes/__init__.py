"""Bayesian (MMSE) and MAP rotation estimation with EM-style reconstruction."""

from . import bench, estimators, forward, reconstruct, so3  # noqa: F401

__all__ = ["so3", "forward", "estimators", "reconstruct", "bench"]
__version__ = "0.1.0"
