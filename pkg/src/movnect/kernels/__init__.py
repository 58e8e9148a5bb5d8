"""Hot loops behind a switchable backend.

``MOVNECT_BACKEND=numpy`` forces the pure-numpy path; anything else (or
unset) uses numba when it imports cleanly. Both modules stay importable so
tests and benchmarks can compare them side by side.
"""
import os

from . import _numpy

try:
    from . import _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

BACKENDS = {"numpy": _numpy}
if _numba is not None:
    BACKENDS["numba"] = _numba


def _select():
    wanted = os.environ.get("MOVNECT_BACKEND", "numba").strip().lower()
    if wanted not in ("numpy", "numba"):
        raise ValueError(f"MOVNECT_BACKEND must be 'numpy' or 'numba', got {wanted!r}")
    if wanted == "numba" and _numba is None:
        wanted = "numpy"
    return wanted


BACKEND = _select()
_impl = BACKENDS[BACKEND]

im2col = _impl.im2col
col2im = _impl.col2im
dw_conv = _impl.dw_conv
dw_conv_grad = _impl.dw_conv_grad
bilinear = _impl.bilinear
bilinear_grad = _impl.bilinear_grad
one_euro_run = _impl.one_euro_run
adam_update = _impl.adam_update

__all__ = [
    "BACKEND",
    "BACKENDS",
    "im2col",
    "col2im",
    "dw_conv",
    "dw_conv_grad",
    "bilinear",
    "bilinear_grad",
    "one_euro_run",
    "adam_update",
]
