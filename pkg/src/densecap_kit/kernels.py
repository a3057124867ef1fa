"""Kernel selection: the compiled extension when importable, else the pure-Python fallback.

Set ``DCK_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
if not os.environ.get("DCK_PURE_PYTHON"):
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
else:
    _impl = _kernels_py

lcs_length = _impl.lcs_length
meteor_align = _impl.meteor_align

__all__ = ["BACKEND", "lcs_length", "meteor_align"]
