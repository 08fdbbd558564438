"""Loss kernels with a compiled backend and a numpy fallback.

The compiled extension ``_ckernels`` is used when it was built; set
``OSVDA_PURE_PYTHON=1`` to force the numpy implementation. Both backends
agree to rounding but not bitwise, so a training run is reproducible only
within one backend.
"""

import os

from . import _numpy_kernels

BACKEND = "numpy"
_impl = _numpy_kernels

if os.environ.get("OSVDA_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels
    except ImportError:  # extension not built
        pass
    else:
        _impl = _ckernels
        BACKEND = "cython"


def get_backend(name=None):
    """Return the kernel module for ``name`` ('cython' or 'numpy'),
    or the active one when ``name`` is None."""
    if name is None:
        return _impl
    if name == "numpy":
        return _numpy_kernels
    if name == "cython":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


def masked_contrastive(a, b, pos, den, tau):
    return _impl.masked_contrastive(a, b, pos, den, tau)


def triplet(h, hp, hn, alpha):
    return _impl.triplet(h, hp, hn, alpha)


def softmax_xent(logits, labels):
    return _impl.softmax_xent(logits, labels)
