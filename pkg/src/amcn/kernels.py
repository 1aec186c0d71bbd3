"""Kernel backend selection.

The compiled Cython kernels are used when the extension was built; otherwise
the numpy fallback is used. Set ``AMCN_KERNELS=python`` to force the fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
im2col = _kernels_py.im2col
col2im = _kernels_py.col2im

if os.environ.get("AMCN_KERNELS", "").lower() != "python":
    try:
        from ._ext import _kernels as _compiled
    except ImportError:
        pass
    else:
        BACKEND = "cython"
        im2col = _compiled.im2col
        col2im = _compiled.col2im
