"""Hot kernels: ray compositing and nearest-neighbor search.

The compiled extension is used when it imports; otherwise the numpy
fallback. Set ``JOINTNERF_KERNELS=python`` to force the fallback.
"""
import os

from . import _pykernels

if os.environ.get("JOINTNERF_KERNELS", "").lower() == "python":
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
        BACKEND = "python"

composite_forward = _impl.composite_forward
composite_backward = _impl.composite_backward
nearest_neighbors = _impl.nearest_neighbors


def backends():
    """Available implementations keyed by name."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels
        out["cython"] = _ckernels
    except ImportError:
        pass
    return out


__all__ = ["BACKEND", "backends", "composite_forward", "composite_backward",
           "nearest_neighbors"]
