"""Kernel dispatch: the compiled extension when available, else the
numpy fallback.

Set STORYALIGN_FORCE_FALLBACK=1 to ignore an installed extension (used by
the parity tests and the benchmark).  Both implementations are kept
behaviorally identical; see _kernels_py for the contract notes.
"""

from __future__ import annotations

import os

if os.environ.get("STORYALIGN_FORCE_FALLBACK", "") == "1":
    from . import _kernels_py as _impl

    COMPILED = False
else:
    try:
        from . import _ckernels as _impl  # type: ignore[attr-defined]

        COMPILED = True
    except ImportError:
        from . import _kernels_py as _impl

        COMPILED = False

nearest_active_pair = _impl.nearest_active_pair
min_intersection_combo = _impl.min_intersection_combo
best_pooled_dot_combo = _impl.best_pooled_dot_combo


def implementation_name() -> str:
    return "compiled" if COMPILED else "fallback"
