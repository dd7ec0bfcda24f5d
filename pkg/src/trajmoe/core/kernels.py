"""Kernel backend selection.

The compiled extension is used when importable. Set ``TRAJMOE_BACKEND=python``
to force the numpy fallback, or ``TRAJMOE_BACKEND=ext`` to fail loudly when the
extension is missing.
"""
import os

from . import _kernels_py

_requested = os.environ.get("TRAJMOE_BACKEND", "auto").lower()
if _requested not in ("auto", "ext", "python"):
    raise ImportError(f"TRAJMOE_BACKEND must be auto, ext or python, got {_requested!r}")

_impl = _kernels_py
BACKEND = "python"
if _requested != "python":
    try:
        from . import _kernels as _ext
    except ImportError:
        if _requested == "ext":
            raise
    else:
        _impl = _ext
        BACKEND = "ext"

gelu_fwd = _impl.gelu_fwd
gelu_bwd = _impl.gelu_bwd
layer_norm_fwd = _impl.layer_norm_fwd
layer_norm_bwd = _impl.layer_norm_bwd
softmax_fwd = _impl.softmax_fwd
softmax_bwd = _impl.softmax_bwd
topk_rows = _impl.topk_rows


def available_backends():
    names = ["python"]
    try:
        from . import _kernels  # noqa: F401
    except ImportError:
        pass
    else:
        names.append("ext")
    return names


def load_backend(name):
    """Return the kernel module for ``name`` regardless of the active selection."""
    if name == "python":
        return _kernels_py
    if name == "ext":
        from . import _kernels

        return _kernels
    raise ValueError(f"unknown kernel backend {name!r}")
