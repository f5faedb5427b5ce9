"""Hot kernels, backed by the compiled extension when it is importable.

Set ``ASYNCDFL_PURE_PYTHON=1`` to force the numpy fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("ASYNCDFL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

# above this many rows numpy's BLAS matmul beats the fused compiled loop
XENT_COMPILED_MAX_ROWS = 256

masked_average = _impl.masked_average
mean_pairwise_distance = _impl.mean_pairwise_distance


def softmax_xent_grad(x, y, w, b):
    """Mean cross-entropy of softmax regression and its gradients ``(value, gw, gb)``."""
    if len(y) > XENT_COMPILED_MAX_ROWS:
        return _kernels_py.softmax_xent_grad(x, y, w, b)
    return _impl.softmax_xent_grad(x, y, w, b)


__all__ = ["BACKEND", "masked_average", "softmax_xent_grad", "mean_pairwise_distance"]
