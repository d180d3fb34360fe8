"""Resampling kernels: compiled extension when built, numpy otherwise.

Set ``TARC_BACKEND=python`` to force the numpy kernels.
"""

import os

from . import resample_py

BACKEND = "python"
_impl = resample_py

if os.environ.get("TARC_BACKEND", "").lower() != "python":
    try:
        from . import resample as _compiled  # type: ignore[attr-defined]
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

crop_resize = _impl.crop_resize
rotate = _impl.rotate

__all__ = ["BACKEND", "crop_resize", "rotate", "resample_py"]
