"""Banded attention kernels.

The compiled extension is used when it was built; otherwise the numpy
implementation is used. Set ``LONGSUM_KERNEL=python`` to force the
fallback, or ``LONGSUM_KERNEL=native`` to fail loudly when the extension
is missing.
"""

import os

from . import _banded_numpy

try:
    from . import _banded_ext
except ImportError:  # extension not built
    _banded_ext = None

BACKENDS = {"python": _banded_numpy}
if _banded_ext is not None:
    BACKENDS["native"] = _banded_ext


def _select():
    want = os.environ.get("LONGSUM_KERNEL", "auto").lower()
    if want == "python":
        return "python"
    if want == "native":
        if _banded_ext is None:
            raise ImportError("LONGSUM_KERNEL=native but the compiled kernel is not built")
        return "native"
    return "native" if _banded_ext is not None else "python"


BACKEND = _select()
_impl = BACKENDS[BACKEND]


def get_backend(name=None):
    """Return the kernel module called ``name`` (default: the active one)."""
    if name is None:
        return _impl
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} unavailable; have {sorted(BACKENDS)}") from None
