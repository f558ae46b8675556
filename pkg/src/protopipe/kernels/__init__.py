"""Backend selection for the hot conv/pool kernels.

The compiled extension (`protopipe.kernels._fastops`) is preferred; the
vectorized numpy module (`protopipe.kernels.reference`) is the drop-in
fallback. Set PROTOPIPE_PURE_PYTHON=1 to force the fallback, e.g. for
benchmarking or debugging. `set_backend` swaps the active implementation
at runtime (used by the parity tests and the kernel benchmark).
"""

import os

from . import reference

_IMPLS = {"numpy": reference}

if not os.environ.get("PROTOPIPE_PURE_PYTHON"):
    try:
        from . import _fastops

        _IMPLS["cython"] = _fastops
    except ImportError:
        pass

BACKEND = "cython" if "cython" in _IMPLS else "numpy"


def available_backends():
    return sorted(_IMPLS)


def set_backend(name):
    """Select the kernel implementation; returns the previous backend name."""
    global BACKEND, conv3x3_forward, conv3x3_backward
    global maxpool2x2_forward, maxpool2x2_backward
    if name not in _IMPLS:
        raise ValueError(f"unknown kernel backend {name!r}; have {available_backends()}")
    previous = BACKEND
    impl = _IMPLS[name]
    conv3x3_forward = impl.conv3x3_forward
    conv3x3_backward = impl.conv3x3_backward
    maxpool2x2_forward = impl.maxpool2x2_forward
    maxpool2x2_backward = impl.maxpool2x2_backward
    BACKEND = name
    return previous


set_backend(BACKEND)
