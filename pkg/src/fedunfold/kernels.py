"""Backend selection for the MLP hot loop.

The compiled ``_ckernels`` extension is used when it was built; otherwise
the numpy implementation in ``_pykernels`` takes over. Set
``FEDUNFOLD_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _pykernels

MSE = _pykernels.MSE
CROSS_ENTROPY = _pykernels.CROSS_ENTROPY

_ckernels = None
if os.environ.get("FEDUNFOLD_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels
    except ImportError:  # extension not built
        _ckernels = None

BACKEND = "cython" if _ckernels is not None else "python"
_impl = _ckernels if _ckernels is not None else _pykernels

loss_grad = _impl.loss_grad
sgd_steps = _impl.sgd_steps
forward = _pykernels.forward


def get_backend(name):
    """Return the kernel module for ``"cython"`` or ``"python"``."""
    if name == "python":
        return _pykernels
    if name == "cython":
        if _ckernels is None:
            raise ImportError("compiled kernels are not available")
        return _ckernels
    raise ValueError(f"unknown backend {name!r}")
