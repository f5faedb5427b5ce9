"""Pure-numpy implementations of the hot kernels.

These are the reference versions; ``_kernels.pyx`` mirrors them loop for loop.
"""

import numpy as np


def masked_average(values, masks, weights, fallback):
    """Per-parameter weighted average over the models that keep that parameter.

    Parameters
    ----------
    values : ndarray, shape (M, K)
        Parameter vectors of the contributing models.
    masks : ndarray, shape (M, K)
        Keep (1) / prune (0) flags for each model.
    weights : ndarray, shape (M,)
        Aggregation weight of each model.
    fallback : ndarray, shape (K,)
        Value used where no model keeps the parameter.
    """
    values = np.asarray(values, dtype=np.float64)
    masks = np.asarray(masks, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    wm = weights[:, None] * masks
    num = (wm * values).sum(axis=0)
    den = wm.sum(axis=0)
    out = np.array(fallback, dtype=np.float64, copy=True)
    ok = den != 0.0
    out[ok] = num[ok] / den[ok]
    return out


def softmax_xent_grad(x, y, w, b):
    """Mean cross-entropy of a linear softmax model and its gradient.

    Returns ``(loss, grad_w, grad_b)`` with ``grad_w`` shaped like ``w``.
    """
    n = x.shape[0]
    z = x @ w + b
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    s = ez.sum(axis=1, keepdims=True)
    p = ez / s
    rows = np.arange(n)
    loss = float(np.mean(np.log(s[:, 0]) - z[rows, y]))
    d = p
    d[rows, y] -= 1.0
    d /= n
    return loss, x.T @ d, d.sum(axis=0)


def mean_pairwise_distance(models):
    """Mean L2 distance over all unordered pairs of rows."""
    models = np.asarray(models, dtype=np.float64)
    m = models.shape[0]
    if m < 2:
        return 0.0
    total = 0.0
    for i in range(m - 1):
        diff = models[i + 1:] - models[i]
        total += float(np.sqrt((diff * diff).sum(axis=1)).sum())
    return total / (m * (m - 1) / 2)
