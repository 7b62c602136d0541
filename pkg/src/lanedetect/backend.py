"""Compute backend selection.

LANEDETECT_BACKEND controls which kernel module the package uses:

    auto   (default) numba if it imports cleanly, else numpy
    numba  require the compiled kernels, error if numba is missing
    numpy  force the pure numpy fallback

Resolution happens once, on first use.  select() overrides it at
runtime, which the benchmark and the cross-backend tests rely on.
"""

import os

from .errors import BackendError

_CHOICES = ("auto", "numba", "numpy")

_impl = None
_name = None


def get_impl(name: str):
    """Import and return a kernel module by backend name."""
    if name == "numpy":
        from .kernels import numpy_kernels
        return numpy_kernels
    if name == "numba":
        try:
            from .kernels import numba_kernels
        except ImportError as exc:
            raise BackendError(f"numba backend unavailable: {exc}") from exc
        return numba_kernels
    raise BackendError(f"unknown backend {name!r}, expected one of {_CHOICES}")


def select(name: str):
    """Force a backend, bypassing the environment variable.

    "auto" picks numba when it is importable and numpy otherwise, the
    same rule the environment default follows.
    """
    global _impl, _name
    if name == "auto":
        try:
            name = "numba"
            mod = get_impl(name)
        except BackendError:
            name = "numpy"
            mod = get_impl(name)
    else:
        mod = get_impl(name)
    _impl = mod
    _name = name
    return _impl


def impl():
    """The active kernel module, resolving LANEDETECT_BACKEND on first call."""
    global _impl, _name
    if _impl is not None:
        return _impl
    choice = os.environ.get("LANEDETECT_BACKEND", "auto").strip().lower() or "auto"
    if choice not in _CHOICES:
        raise BackendError(f"LANEDETECT_BACKEND={choice!r}, expected one of {_CHOICES}")
    return select(choice)


def active_backend() -> str:
    impl()
    return _name
