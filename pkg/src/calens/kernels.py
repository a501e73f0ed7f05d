"""Backend selection for the hot loops.

The compiled ``_ckernels`` module is preferred when it imports; otherwise the
NumPy versions in ``_pykernels`` are used. :func:`use_backend` switches at
runtime (tests and the benchmark exercise both).
"""
import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # pragma: no cover - depends on the build
    _ckernels = None

_impl = _ckernels if _ckernels is not None else _pykernels
BACKEND = "cython" if _ckernels is not None else "python"


def available_backends():
    return ["cython", "python"] if _ckernels is not None else ["python"]


def use_backend(name):
    global _impl, BACKEND
    if name == "cython":
        if _ckernels is None:
            raise RuntimeError("compiled kernels are not built")
        _impl = _ckernels
    elif name == "python":
        _impl = _pykernels
    else:
        raise ValueError(f"unknown backend {name!r}")
    BACKEND = name


def current_backend():
    return BACKEND


def mean_max_softmax(scores, inv_t):
    """Mean over rows of ``max_j softmax(row * inv_t)_j``."""
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    return float(_impl.mean_max_softmax(scores, float(inv_t)))


def combiner_errors(mass, cond, start=0, stop=None):
    """Error of every deterministic combiner with index in ``[start, stop)``.

    Combiner ``idx`` assigns class ``(idx // K**c) % K`` to cell ``c``; its error
    is ``sum_c mass[c] * (1 - cond[c, class])``.
    """
    mass = np.ascontiguousarray(mass, dtype=np.float64)
    cond = np.ascontiguousarray(cond, dtype=np.float64)
    if stop is None:
        stop = cond.shape[1] ** cond.shape[0]
    return _impl.combiner_errors(mass, cond, int(start), int(stop))
