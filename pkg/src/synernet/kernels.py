"""Loss-kernel dispatch: compiled extension when importable, numpy otherwise.

Set ``SYNERNET_KERNELS=python`` to force the numpy fallback.
"""

from __future__ import annotations

import os

from . import _kernels_py

_forced = os.environ.get("SYNERNET_KERNELS", "").strip().lower()

if _forced == "python":
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        if _forced == "cython":
            raise
        _impl = _kernels_py
        BACKEND = "python"

contrastive_loss = _impl.contrastive_loss
cross_entropy = _impl.cross_entropy
softmax_rows = _impl.softmax_rows

__all__ = ["BACKEND", "contrastive_loss", "cross_entropy", "softmax_rows"]
