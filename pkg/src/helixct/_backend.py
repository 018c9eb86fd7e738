"""Kernel backend selection: compiled extension when available, numpy otherwise.

Set HELIXCT_FORCE_FALLBACK=1 to force the pure-numpy path.
"""

from __future__ import annotations

import os

if os.environ.get("HELIXCT_FORCE_FALLBACK", "") not in ("", "0"):
    from helixct import _kernels_fallback as kernels
else:
    try:
        from helixct import _core as kernels  # type: ignore[no-redef]
    except ImportError:
        from helixct import _kernels_fallback as kernels  # type: ignore[no-redef]

backend_name = kernels.backend_name
forward_march = kernels.forward_march
bp_gather = kernels.bp_gather
bp_scatter = kernels.bp_scatter
bp_scatter_mip = kernels.bp_scatter_mip
set_threads = kernels.set_threads
