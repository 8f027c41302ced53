"""Hot-loop kernels with a compiled backend and a numpy fallback.

The compiled extension is used when it imports; set ``CLBENCH_KERNELS=python``
to force the fallback.  ``BACKEND`` names the active implementation.
"""
import os

from clbench.kernels import _pykernels

if os.environ.get("CLBENCH_KERNELS", "").lower() in ("python", "py", "numpy"):
    _impl = _pykernels
else:
    try:
        from clbench.kernels import _ckernels as _impl
    except ImportError:
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"

trailing_mean = _impl.trailing_mean
stencil_blend = _impl.stencil_blend
rank_counts = _impl.rank_counts
weighted_step_sums = _impl.weighted_step_sums
bilinear_apply = _impl.bilinear_apply


def available_backends():
    backends = {"python": _pykernels}
    try:
        from clbench.kernels import _ckernels
    except ImportError:
        pass
    else:
        backends["cython"] = _ckernels
    return backends


__all__ = [
    "BACKEND",
    "available_backends",
    "bilinear_apply",
    "rank_counts",
    "stencil_blend",
    "trailing_mean",
    "weighted_step_sums",
]
