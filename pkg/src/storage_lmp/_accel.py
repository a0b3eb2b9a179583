"""Pick the compiled kernels when built, else the numpy fallback.

Set ``STORAGE_LMP_PURE=1`` to force the fallback.
"""
import os

from . import _kernels_py as fallback

if os.environ.get("STORAGE_LMP_PURE", "") not in ("", "0"):
    kernels = fallback
else:
    try:
        from . import _kernels as kernels
    except ImportError:  # extension not built
        kernels = fallback

IMPLEMENTATION = kernels.IMPLEMENTATION
