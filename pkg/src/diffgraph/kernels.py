"""Kernel dispatch: compiled extension when importable, numpy fallback otherwise.

Set ``DIFFGRAPH_PURE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("DIFFGRAPH_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "compiled"

fnv1a64 = _impl.fnv1a64
batch_rewards = _impl.batch_rewards


def compiled_module():
    """The compiled extension module, or None if it is not built."""
    try:
        from . import _kernels  # type: ignore[attr-defined]
    except ImportError:
        return None
    return _kernels
