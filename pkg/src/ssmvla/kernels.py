"""Kernel backend selection.

The compiled ``_kernels`` extension is used when it imports; otherwise, or
when ``SSMVLA_PURE_PYTHON=1``, the numpy implementations are used. Both
expose ``render_scene`` and ``nearest_codes`` with identical results.
"""
import logging
import os

from . import _kernels_py

logger = logging.getLogger(__name__)


def _load_compiled():
    if os.environ.get("SSMVLA_PURE_PYTHON") == "1":
        return None
    try:
        from . import _kernels
    except ImportError:
        logger.debug("compiled kernels unavailable, using numpy fallback")
        return None
    return _kernels


_compiled = _load_compiled()
BACKEND = "compiled" if _compiled is not None else "python"
_impl = _compiled if _compiled is not None else _kernels_py


def get_backend(name=None):
    """Return a kernel module by name ("compiled" or "python"); default is the active one."""
    if name is None:
        return _impl
    if name == "python":
        return _kernels_py
    if name == "compiled":
        if _compiled is None:
            raise ImportError("compiled kernels are not built; run `pip install -e . --no-build-isolation`")
        return _compiled
    raise ValueError(f"unknown kernel backend {name!r}")


def render_scene(*args):
    return _impl.render_scene(*args)


def nearest_codes(x, codes):
    return _impl.nearest_codes(x, codes)
