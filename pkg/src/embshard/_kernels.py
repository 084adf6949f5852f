"""Backend selection for the search kernels.

The compiled ``_core`` extension is used when it imports; otherwise the
pure-Python ``_fallback``. ``EMBSHARD_BACKEND=python`` forces the fallback.
"""

import os

from . import _fallback

try:
    from . import _core
except ImportError:  # extension not built
    _core = None

BACKENDS = {"python": _fallback}
if _core is not None:
    BACKENDS["cython"] = _core

_requested = os.environ.get("EMBSHARD_BACKEND", "").strip().lower()
if _requested and _requested not in BACKENDS:
    raise ImportError(f"EMBSHARD_BACKEND={_requested!r} unavailable; have {sorted(BACKENDS)}")
DEFAULT_BACKEND = _requested or ("cython" if _core is not None else "python")


def get_backend(name=None):
    return BACKENDS[name or DEFAULT_BACKEND]


def make_engine(compute_model, enabled=True, backend=None):
    mod = get_backend(backend)
    W1, b1, W2, b2 = compute_model.head.params
    return mod.HeadEngine(W1, b1, W2[:, 0], float(b2[0]), float(compute_model.y_scale), enabled)
