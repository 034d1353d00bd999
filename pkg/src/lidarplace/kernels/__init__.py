"""Integer kernel dispatch.

The compiled extension is used when it was built; otherwise, or when
``LIDARPLACE_KERNELS=python`` is set, the numpy fallback is selected.
Both backends are bit-identical.
"""
import os
from contextlib import contextmanager

from . import _pykernels as python

try:
    from . import _ckernels as compiled
except ImportError:  # extension not built
    compiled = None

if compiled is not None and os.environ.get("LIDARPLACE_KERNELS", "").lower() != "python":
    _impl, BACKEND = compiled, "cython"
else:
    _impl, BACKEND = python, "python"

qgemm_acc = _impl.qgemm_acc
qdepthwise_acc = _impl.qdepthwise_acc
requant = _impl.requant
qadd = _impl.qadd


def backends():
    """Available kernel modules by name."""
    out = {"python": python}
    if compiled is not None:
        out["cython"] = compiled
    return out


def _bind(impl, name):
    global _impl, BACKEND, qgemm_acc, qdepthwise_acc, requant, qadd
    _impl, BACKEND = impl, name
    qgemm_acc, qdepthwise_acc = impl.qgemm_acc, impl.qdepthwise_acc
    requant, qadd = impl.requant, impl.qadd


@contextmanager
def use_backend(name):
    """Temporarily route the dispatch names to backend ``name``."""
    avail = backends()
    if name not in avail:
        raise ValueError(f"kernel backend {name!r} not available (have {sorted(avail)})")
    prev = (_impl, BACKEND)
    _bind(avail[name], name)
    try:
        yield
    finally:
        _bind(*prev)
