"""Kernel backend selection.

The compiled backend is used when the extension is importable; otherwise
the NumPy fallback is selected. Set CVRLAB_KERNELS=py or =c to force a
backend (=c raises if the extension is missing). `set_backend` exists for
tests and benchmarks; switching is process-global.
"""

from __future__ import annotations

import os

from . import pykernels

_FUNCS = (
    "sigmoid",
    "leaky_relu",
    "leaky_relu_grad",
    "bce_loss_grad",
    "adam_update",
    "gather_rows",
    "scatter_add_rows",
)

_impl = pykernels


def _load_compiled():
    from . import _ckernels  # noqa: PLC0415

    return _ckernels


def set_backend(name: str) -> str:
    """Select 'c', 'py', or 'auto'. Returns the backend actually in use."""
    global _impl
    if name == "c":
        _impl = _load_compiled()
    elif name == "py":
        _impl = pykernels
    elif name == "auto":
        try:
            _impl = _load_compiled()
        except ImportError:
            _impl = pykernels
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    return backend_name()


def backend_name() -> str:
    return _impl.NAME


def __getattr__(name: str):
    if name in _FUNCS:
        return getattr(_impl, name)
    raise AttributeError(name)


set_backend(os.environ.get("CVRLAB_KERNELS", "auto"))
