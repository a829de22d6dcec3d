"""Kernel backend selection.

The compiled extension is used when it imports; otherwise (or with
``PESMOC_PURE_PYTHON=1``) the numpy fallback takes its place.
"""

import os

from . import _fallback

if os.environ.get("PESMOC_PURE_PYTHON", "") == "1":
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback
        BACKEND = "python"

nondominated_mask = _impl.nondominated_mask
hypervolume_2d = _impl.hypervolume_2d
phi_derivatives = _impl.phi_derivatives
omega_derivatives = _impl.omega_derivatives
VAR_EPS = _fallback.VAR_EPS

__all__ = [
    "BACKEND",
    "VAR_EPS",
    "nondominated_mask",
    "hypervolume_2d",
    "phi_derivatives",
    "omega_derivatives",
]
