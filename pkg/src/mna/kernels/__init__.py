"""Hot loops of the batch simulator.

The compiled extension is used when it was built; otherwise the pure-Python
module is.  Setting ``MNA_PURE_PYTHON=1`` forces the fallback, and
:func:`set_backend` switches at runtime (tests and benchmarks use it).
"""

import os

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels

_impl = _pykernels
BACKEND = "python"


def available() -> list[str]:
    return sorted(_BACKENDS)


def set_backend(name: str) -> None:
    global _impl, BACKEND
    if name not in _BACKENDS:
        raise ValueError(f"kernel backend {name!r} not available; have {available()}")
    _impl = _BACKENDS[name]
    BACKEND = name


if _ckernels is not None and not os.environ.get("MNA_PURE_PYTHON"):
    set_backend("cython")


def meter_run(times, need, rate, cap, credits, last):
    times = np.ascontiguousarray(times, dtype=np.int64)
    need = np.broadcast_to(np.asarray(need, dtype=np.int64), times.shape)
    need = np.ascontiguousarray(need)
    mask, credits, last = _impl.meter_run(times, need, int(rate), int(cap),
                                          int(credits), int(last))
    return mask.astype(bool), int(credits), int(last)


def amm_run(colors, n_a, n_b, last):
    colors = np.ascontiguousarray(colors, dtype=np.uint8)
    n_a, n_b, last, pos, counter = _impl.amm_run(colors, int(n_a), int(n_b), int(last))
    return int(n_a), int(n_b), int(last), pos, counter


def admit_run(sizes, budget):
    sizes = np.ascontiguousarray(sizes, dtype=np.int64)
    mask, budget = _impl.admit_run(sizes, int(budget))
    return mask.astype(bool), int(budget)
