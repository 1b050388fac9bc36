"""Kernel backend selection.

The hot per-layer kernels exist twice: a compiled Cython extension and a
pure-numpy fallback with the same signatures. Selection happens once at
import time:

* ``AXNET_BACKEND=cython`` requires the extension (ImportError if absent),
* ``AXNET_BACKEND=python`` / ``numpy`` forces the fallback,
* unset or ``auto`` prefers the extension when it imported cleanly.

``use_backend()`` re-selects at runtime; it exists for tests and for the
backend comparison benchmark.
"""

import os

from . import numpy_backend

LINEAR = numpy_backend.LINEAR
RELU = numpy_backend.RELU
SIGMOID = numpy_backend.SIGMOID
SOFTMAX = numpy_backend.SOFTMAX

try:
    from . import _ckernels
except ImportError:
    _ckernels = None

_BACKENDS = {"numpy": numpy_backend, "python": numpy_backend}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels

_active = numpy_backend


def available_backends():
    return sorted(set(mod.NAME for mod in _BACKENDS.values()))


def use_backend(name):
    """Select the kernel backend by name ('numpy', 'python', 'cython', 'auto')."""
    global _active
    if name in (None, "", "auto"):
        _active = _ckernels if _ckernels is not None else numpy_backend
    elif name in _BACKENDS:
        _active = _BACKENDS[name]
    else:
        raise ImportError(
            f"backend {name!r} unavailable; have {available_backends()}"
        )
    return _active


def active_backend():
    """Name of the backend currently in use."""
    return _active.NAME


def get():
    """The active backend module (affine/activation/adam kernels)."""
    return _active


use_backend(os.environ.get("AXNET_BACKEND", "auto"))
