"""Selects the compiled dynamics core, falling back to pure Python.

Set ``IMPULSE_ASSIST_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py

NAME = "python"
KernelModel = _kernels_py.KernelModel

if not os.environ.get("IMPULSE_ASSIST_PURE_PYTHON"):
    try:
        from . import _kernels
    except ImportError:  # extension not built
        _kernels = None
    else:
        KernelModel = _kernels.KernelModel
        NAME = "cython"
else:
    _kernels = None


def available():
    """Names of the backends importable in this environment."""
    return ["python"] + (["cython"] if _kernels is not None else [])


def kernel_class(name):
    if name == "python":
        return _kernels_py.KernelModel
    if name == "cython":
        if _kernels is None:
            raise ImportError("compiled kernels are not available")
        return _kernels.KernelModel
    raise ValueError(f"unknown backend {name!r}")
