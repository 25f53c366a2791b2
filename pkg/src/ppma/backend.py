"""Kernel backend selection.

Prefers the compiled Cython extension; falls back to the numpy twin when the
extension is missing or `PPMA_PURE_PYTHON=1` is set. Both expose the same
functions, so callers import `ppma.backend.kernels` and never care which one
is active.
"""

import os

from ppma import _kernels_py

if os.environ.get("PPMA_PURE_PYTHON") == "1":
    kernels = _kernels_py
    BACKEND = "numpy"
else:
    try:
        from ppma import _kernels as _compiled

        kernels = _compiled
        BACKEND = "compiled"
    except ImportError:
        kernels = _kernels_py
        BACKEND = "numpy"
