"""Backend selection for the hot MPM kernels.

Prefers the compiled Cython extension; falls back to the vectorized numpy
implementation when the extension is missing or when the environment
variable ``VDGNS_PURE_PYTHON`` is set (useful for the benchmark and for
debugging).  Both backends implement the same ``substep`` contract.
"""

import os

from . import _mpm_fallback

if os.environ.get("VDGNS_PURE_PYTHON"):
    _impl = _mpm_fallback
    BACKEND = "numpy"
else:
    try:
        from . import _mpm_kernels as _impl  # type: ignore[attr-defined]
        BACKEND = "cython"
    except ImportError:
        _impl = _mpm_fallback
        BACKEND = "numpy"

substep = _impl.substep


def backend_name() -> str:
    return BACKEND


def available_backends():
    out = {"numpy": _mpm_fallback.substep}
    try:
        from . import _mpm_kernels
        out["cython"] = _mpm_kernels.substep
    except ImportError:
        pass
    return out
