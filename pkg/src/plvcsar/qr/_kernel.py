"""Select the interior point kernel at import time.

The compiled kernel is used when it was built; set ``PLVCSAR_PURE_PYTHON=1``
to force the numpy implementation.
"""
import os

from . import _fnb_py

KERNELS = {"python": _fnb_py.fnb_solve}

try:
    from . import _fnb  # type: ignore[attr-defined]
except ImportError:  # extension not built
    _fnb = None
else:
    KERNELS["cython"] = _fnb.fnb_solve

if os.environ.get("PLVCSAR_PURE_PYTHON") == "1" or "cython" not in KERNELS:
    BACKEND = "python"
else:
    BACKEND = "cython"

fnb_solve = KERNELS[BACKEND]
