"""Kernel backend selection.

The compiled extension is used when it imports; set ``LAQLAB_PURE_PYTHON=1``
to force the numpy fallback. ``BACKEND`` names the active one.
"""
import os

from laqlab import _fallback

if os.environ.get("LAQLAB_PURE_PYTHON") == "1":
    _impl = _fallback
else:
    try:
        from laqlab import _kernels as _impl
    except ImportError:
        _impl = _fallback

BACKEND = "compiled" if _impl is not _fallback else "python"

pack_codes = _impl.pack_codes
unpack_codes = _impl.unpack_codes
packed_gemv = _impl.packed_gemv
jacobi_eigh = _impl.jacobi_eigh


def backends():
    """Map of every importable backend name to its module."""
    out = {"python": _fallback}
    try:
        from laqlab import _kernels

        out["compiled"] = _kernels
    except ImportError:
        pass
    return out
