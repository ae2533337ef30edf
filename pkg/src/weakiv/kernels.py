"""Selects the replication kernel at import.

The compiled extension is used when it imports cleanly; setting
``WEAKIV_PURE_PYTHON=1`` forces the NumPy version.
"""

from __future__ import annotations

import os

from . import _kernels_py
from ._kernels_py import ALPHA, B2SLS, BLIML, JSTAT, KPSTAT, N_OUT, STATUS  # noqa: F401

BACKEND = "python"
replicate_stats = _kernels_py.replicate_stats

if os.environ.get("WEAKIV_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels
    except ImportError:  # extension not built
        pass
    else:
        replicate_stats = _kernels.replicate_stats
        BACKEND = "cython"
