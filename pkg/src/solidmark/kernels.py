"""Hot-kernel dispatch: the compiled ``_kernels`` extension when it is built,
the numpy fallback otherwise.  Set ``SOLIDMARK_PURE_PYTHON=1`` to force the
fallback."""
from __future__ import annotations

import os

from . import _kernels_py

BACKEND = "python"
if os.environ.get("SOLIDMARK_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
else:
    _impl = _kernels_py

pairwise_l2 = _impl.pairwise_l2
patched_pairwise = _impl.patched_pairwise
# numpy's vectorized reduction beats the compiled loop here
masked_channel_means = _kernels_py.masked_channel_means
count_at_most = _impl.count_at_most
