"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise (or when
``TISSUEFLOW_PURE=1`` is set) the NumPy/pure-Python fallback is used.
Both expose ``fnv1a64``, ``nearest_max_min``, ``label_components``,
``points_in_polygon`` and ``softmax_xent``.
"""

import os

from tissueflow import _fallback

FNV_OFFSET = _fallback.FNV_OFFSET

if os.environ.get("TISSUEFLOW_PURE"):
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from tissueflow import _kernels as _impl
        BACKEND = "compiled"
    except ImportError:
        _impl = _fallback
        BACKEND = "python"

fnv1a64 = _impl.fnv1a64
nearest_max_min = _impl.nearest_max_min
label_components = _impl.label_components
points_in_polygon = _impl.points_in_polygon
_xent = _impl.softmax_xent


def softmax_xent(theta, x, y, k, l2):
    # the compiled kernel keeps logits on the stack and caps the class count
    if k > 64:
        return _fallback.softmax_xent(theta, x, y, k, l2)
    return _xent(theta, x, y, k, l2)


def backends():
    """Return ``{name: module}`` for every importable backend."""
    found = {"python": _fallback}
    try:
        from tissueflow import _kernels
        found["compiled"] = _kernels
    except ImportError:
        pass
    return found


def hexdigest(h: int) -> str:
    return f"{h:016x}"
