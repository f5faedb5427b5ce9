"""Desk-scale differentiable classifiers on flat parameter vectors.

Two architectures are supported: multinomial logistic ("softmax") regression and
a one-hidden-layer tanh MLP. Parameters live in one flat float64 vector; the
layout is row-major per layer, in the order listed by :attr:`Arch.layers`.

Mask convention: evaluation uses the effective parameters ``params * mask``.
Gradients and Hessians are those of the loss *at* the effective parameters, so
they are reported at masked positions too (what the loss would do if a pruned
parameter came back). :func:`sgd_step` never moves masked positions.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import kernels
from .errors import ConfigError, NumericError

K_MAX = 512


class Layer(NamedTuple):
    name: str
    shape: tuple
    offset: int

    @property
    def size(self):
        return int(np.prod(self.shape))

    @property
    def is_bias(self):
        return len(self.shape) == 1


@dataclass(frozen=True)
class Arch:
    kind: str
    dims: int
    classes: int
    hidden: int = 8

    def __post_init__(self):
        if self.kind not in ("softmax", "mlp"):
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.dims < 1 or self.classes < 2 or (self.kind == "mlp" and self.hidden < 1):
            raise ConfigError(f"invalid architecture sizes: {self}")

    @property
    def layers(self):
        if self.kind == "softmax":
            shapes = [("w", (self.dims, self.classes)), ("b", (self.classes,))]
        else:
            shapes = [
                ("w1", (self.dims, self.hidden)),
                ("b1", (self.hidden,)),
                ("w2", (self.hidden, self.classes)),
                ("b2", (self.classes,)),
            ]
        out, off = [], 0
        for name, shape in shapes:
            out.append(Layer(name, shape, off))
            off += int(np.prod(shape))
        return out

    @property
    def size(self):
        last = self.layers[-1]
        return last.offset + last.size

    def unpack(self, params):
        """Views of ``params`` per layer, keyed by layer name."""
        return {L.name: params[L.offset:L.offset + L.size].reshape(L.shape) for L in self.layers}

    def init_params(self, rng, scale=0.01):
        return scale * rng.standard_normal(self.size)


class Batch(NamedTuple):
    x: np.ndarray
    y: np.ndarray


def effective(params, mask):
    if mask is None:
        return params
    if mask.shape != params.shape:
        raise ValueError(f"mask length {mask.shape} != params length {params.shape}")
    return params * mask


def _check_finite(arch, params):
    if params.shape != (arch.size,):
        raise ValueError(f"expected {arch.size} parameters, got shape {params.shape}")
    if not np.all(np.isfinite(params)):
        raise NumericError("non-finite model parameters")


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def logits(arch, params, mask, x):
    p = arch.unpack(effective(params, mask))
    if arch.kind == "softmax":
        return x @ p["w"] + p["b"]
    a = np.tanh(x @ p["w1"] + p["b1"])
    return a @ p["w2"] + p["b2"]


def loss(arch, params, mask, batch):
    """Mean cross-entropy of the masked model on ``batch``."""
    eff = effective(params, mask)
    _check_finite(arch, eff)
    lp = _log_softmax(logits(arch, eff, None, batch.x))
    out = float(-lp[np.arange(len(batch.y)), batch.y].mean())
    if not np.isfinite(out):
        raise NumericError("non-finite loss")
    return out


def accuracy(arch, params, mask, x, y):
    return float(np.mean(np.argmax(logits(arch, params, mask, x), axis=1) == y))


def loss_and_gradient(arch, params, mask, batch):
    eff = effective(params, mask)
    _check_finite(arch, eff)
    x, y = batch
    if arch.kind == "softmax":
        p = arch.unpack(eff)
        value, gw, gb = kernels.softmax_xent_grad(x, y, p["w"], p["b"])
        return value, np.concatenate([gw.ravel(), gb])
    p = arch.unpack(eff)
    n = len(y)
    a = np.tanh(x @ p["w1"] + p["b1"])
    lp = _log_softmax(a @ p["w2"] + p["b2"])
    rows = np.arange(n)
    value = float(-lp[rows, y].mean())
    d2 = np.exp(lp)
    d2[rows, y] -= 1.0
    d2 /= n
    d1 = (d2 @ p["w2"].T) * (1.0 - a * a)
    grad = np.concatenate([(x.T @ d1).ravel(), d1.sum(0), (a.T @ d2).ravel(), d2.sum(0)])
    return value, grad


def gradient(arch, params, mask, batch):
    """Gradient of the mean loss with respect to every parameter."""
    return loss_and_gradient(arch, params, mask, batch)[1]


def _split_directions(arch, V):
    """Reshape direction matrix ``V`` (K, M) into per-layer (M, *shape) arrays."""
    m = V.shape[1]
    return {L.name: V[L.offset:L.offset + L.size].T.reshape((m,) + L.shape) for L in arch.layers}


def hvp(arch, params, mask, batch, v):
    """Exact Hessian-vector product by forward-mode differentiation of the gradient.

    ``v`` may be a vector (K,) or a matrix (K, M) of directions.
    """
    eff = effective(params, mask)
    _check_finite(arch, eff)
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    V = v[:, None] if single else v
    if V.shape[0] != arch.size:
        raise ValueError(f"direction length {V.shape[0]} != {arch.size}")
    x, y = batch
    n = len(y)
    p = arch.unpack(eff)
    d = _split_directions(arch, V)
    rows = np.arange(n)
    if arch.kind == "softmax":
        prob = np.exp(_log_softmax(x @ p["w"] + p["b"]))
        rz = np.einsum("nd,mdc->mnc", x, d["w"]) + d["b"][:, None, :]
        rp = prob * (rz - (prob * rz).sum(-1, keepdims=True))
        rp /= n
        out = [np.einsum("nd,mnc->mdc", x, rp).reshape(V.shape[1], -1), rp.sum(1)]
    else:
        a = np.tanh(x @ p["w1"] + p["b1"])
        da = 1.0 - a * a
        prob = np.exp(_log_softmax(a @ p["w2"] + p["b2"]))
        d2 = prob.copy()
        d2[rows, y] -= 1.0
        d2 /= n
        dh = d2 @ p["w2"].T
        rz1 = np.einsum("nd,mdh->mnh", x, d["w1"]) + d["b1"][:, None, :]
        ra = da * rz1
        rz2 = ra @ p["w2"] + np.einsum("nh,mhc->mnc", a, d["w2"]) + d["b2"][:, None, :]
        rd2 = prob * (rz2 - (prob * rz2).sum(-1, keepdims=True)) / n
        rdh = rd2 @ p["w2"].T + np.einsum("nc,mhc->mnh", d2, d["w2"])
        rd1 = rdh * da - 2.0 * dh * a * ra
        m = V.shape[1]
        out = [
            np.einsum("nd,mnh->mdh", x, rd1).reshape(m, -1),
            rd1.sum(1),
            (np.einsum("mnh,nc->mhc", ra, d2) + np.einsum("nh,mnc->mhc", a, rd2)).reshape(m, -1),
            rd2.sum(1),
        ]
    res = np.concatenate(out, axis=1).T
    return res[:, 0] if single else res


def _softmax_hessian(arch, eff, batch):
    x, _ = batch
    n = len(x)
    p = arch.unpack(eff)
    prob = np.exp(_log_softmax(x @ p["w"] + p["b"]))
    xt = np.hstack([x, np.ones((n, 1))])
    c = arch.classes
    da = xt.shape[1]
    # sum_n kron(xt xt^T, diag(p) - p p^T) with index (row a, class c) -> a * C + c
    u = (xt[:, :, None] * prob[:, None, :]).reshape(n, -1)
    H = -(u.T @ u)
    diag = np.einsum("na,nb,nc->acb", xt, xt, prob)
    H4 = H.reshape(da, c, da, c)
    for k in range(c):
        H4[:, k, :, k] += diag[:, k, :]
    return H / n


def hessian(arch, params, mask, batch, k_max=K_MAX):
    """Dense symmetric Hessian of the mean loss.

    Closed form for softmax regression; for the MLP, columns are exact
    Hessian-vector products against the identity. Refuses ``K > k_max``.
    """
    if arch.size > k_max:
        raise ValueError(
            f"model has {arch.size} parameters > k_max={k_max}; use hvp() and a Lanczos "
            "eigensolver instead of a dense Hessian"
        )
    eff = effective(params, mask)
    _check_finite(arch, eff)
    if arch.kind == "softmax":
        H = _softmax_hessian(arch, eff, batch)
    else:
        H = hvp(arch, eff, None, batch, np.eye(arch.size))
    return 0.5 * (H + H.T)


def sgd_step(arch, params, mask, batch, lr):
    """One SGD step; masked positions stay exactly zero."""
    if lr < 0:
        raise ConfigError(f"learning rate must be >= 0, got {lr}")
    out = params - lr * gradient(arch, params, mask, batch)
    if mask is not None:
        out *= mask
    return out


def iterate_minibatches(n, batch_size, rng):
    """Index arrays of one epoch, sampled without replacement."""
    order = rng.permutation(n)
    size = min(batch_size, n)
    return [order[i:i + size] for i in range(0, n, size)]


def local_sgd(arch, params, mask, x, y, lr, epochs, batch_size, rng):
    """Run ``epochs`` passes of minibatch SGD over a device partition.

    Returns ``(params, last_batch, mean_batch_loss)``; the mean is over every
    minibatch loss evaluated before its step.
    """
    losses = []
    last = None
    for _ in range(epochs):
        for idx in iterate_minibatches(len(y), batch_size, rng):
            last = Batch(x[idx], y[idx])
            value, g = loss_and_gradient(arch, params, mask, last)
            losses.append(value)
            params = params - lr * g
            if mask is not None:
                params *= mask
    return params, last, float(np.mean(losses)) if losses else float("nan")


def flops_estimate(arch, mask=None, *, backward=True, bias=True):
    """Per-sample floating point operations of one pass.

    Each kept weight costs one multiply-accumulate (2 FLOPs) in the forward
    pass; each kept bias costs one add. The backward pass costs two forward
    matrix products (input and weight gradients) plus the bias adds. Weight
    and bias counts scale with the per-layer mask density.
    """
    total = 0
    for L in arch.layers:
        kept = L.size if mask is None else int(np.count_nonzero(mask[L.offset:L.offset + L.size]))
        if L.is_bias:
            if bias:
                total += kept * (2 if backward else 1)
        else:
            total += 2 * kept * (3 if backward else 1)
    return total
