"""Kernel backend selection.

The compiled extension is used when it imports; otherwise (or when
``DEFGRAPH_PURE_PYTHON=1`` is set) the numpy implementations take over.
Both backends expose ``fps``, ``grid_knn``, ``splat_plane`` and ``sample_plane``.
"""

import os

from . import _kernels_py

if os.environ.get("DEFGRAPH_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py
        BACKEND = "python"

fps = _impl.fps
grid_knn = _impl.grid_knn
splat_plane = _impl.splat_plane
sample_plane = _impl.sample_plane


def backends():
    """Return ``{name: module}`` for every backend importable in this process."""
    found = {"python": _kernels_py}
    try:
        from . import _kernels
        found["cython"] = _kernels
    except ImportError:
        pass
    return found
