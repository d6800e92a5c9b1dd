"""Kernel backend selection.

The compiled Cython extension is used when it has been built; otherwise
the pure-numpy kernels take over. ``SCONV_BACKEND=pure|cython`` forces a
choice (``cython`` raises if the extension is missing).
"""

from __future__ import annotations

import os

from . import _kernels_py

_choice = os.environ.get("SCONV_BACKEND", "auto")

if _choice == "pure":
    _impl = _kernels_py
elif _choice == "cython":
    from . import _kernels_cy as _impl  # noqa: F401
else:
    try:
        from . import _kernels_cy as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _kernels_py

BACKEND = _impl.NAME

im2col = _impl.im2col
col2im = _impl.col2im
deform_gather = _impl.deform_gather
deform_gather_backward = _impl.deform_gather_backward
pack_cols_cmajor_mod = _impl.pack_cols_cmajor_mod
pack_cols_cmajor = _impl.pack_cols_cmajor
unpack_cols_cmajor = _impl.unpack_cols_cmajor
pack_cols_kmajor = _impl.pack_cols_kmajor
unpack_cols_kmajor = _impl.unpack_cols_kmajor
