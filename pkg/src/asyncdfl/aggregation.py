"""Staleness-aware dynamic aggregation of cached neighbour models.

A device weighs itself and each selected cached model by an importance

    importance = samples * lambda / (sqrt(staleness) * loss)

normalizes the importances into convex weights, nudges each ``lambda`` by a
gradient step on the local loss of the aggregate, and merges the models
parameter by parameter over the contributors that keep that parameter.
"""

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import kernels
from .model import Batch, effective, loss, loss_and_gradient, local_sgd

LAMBDA_INIT = 1.0
LAMBDA_MIN = 1e-3
LAMBDA_MAX = 1e3
LOSS_FLOOR = 1e-8


@dataclass(frozen=True)
class CachedModel:
    """Snapshot of a neighbour's model as received; replaced wholesale on arrival."""

    sender: int
    params: np.ndarray
    mask: np.ndarray
    sender_loss: float
    sender_samples: int
    received_at: int
    sender_rate: float = 0.0
    sent_at: int = 0
    already_aggregated: bool = False

    def staleness(self, t):
        return max(t - self.received_at, 1)

    def loss_value(self):
        return max(self.sender_loss, LOSS_FLOOR)

    def mark_aggregated(self):
        return replace(self, already_aggregated=True)


@dataclass
class WeightState:
    """Per-contributor control parameters and the latest weights.

    Keys are device indices; ``self_index`` is the owning device.
    """

    self_index: int
    lambdas: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)

    def lam(self, j):
        return self.lambdas.get(j, LAMBDA_INIT)


def importance(s_j, lambda_ij, delta_t, loss_j):
    """Raw importance of a contributor; requires ``delta_t >= 1`` and ``loss_j > 0``."""
    if delta_t < 1:
        raise ValueError(f"staleness must be >= 1 (clamp first), got {delta_t}")
    if loss_j <= 0:
        raise ValueError(f"loss must be > 0 (clamp first), got {loss_j}")
    return s_j * lambda_ij / (np.sqrt(delta_t) * loss_j)


def normalize_weights(raw):
    """Scale raw importances ``{device: value}`` to sum to one."""
    if not raw:
        raise ValueError("no contributors to normalize")
    for k, v in raw.items():
        if not v > 0:
            raise ValueError(f"importance of {k} must be > 0, got {v}")
    total = sum(raw.values())
    return {k: v / total for k, v in raw.items()}


def control_gradient_own_term(g, m_j, raw, target, s_j, delta_t, loss_j):
    """Derivative keeping only the target's own weight in the chain rule.

    ``[sum_{k != j} w'_k / (sum_k w'_k)^2] * s_j g.m_j / (sqrt(dt) loss_j)``.
    It ignores how the other normalized weights shift when ``lambda_j`` moves,
    so it is the exact derivative only when ``g`` is orthogonal to every other
    contributor's parameters. Kept for comparison with :func:`control_gradient`.
    """
    if target not in raw:
        raise KeyError(f"target {target} is not among the contributors")
    total = sum(raw.values())
    rest = total - raw[target]
    return rest / total**2 * s_j * float(g @ m_j) / (np.sqrt(delta_t) * loss_j)


def control_gradient(g, models, masks, raw, target, s_j, delta_t, loss_j):
    """Exact derivative of the local loss of the aggregate w.r.t. ``lambda_target``.

    The aggregate is the masked weighted average of ``models`` (dict device ->
    params) under weights proportional to ``raw``; ``g`` is the loss gradient at
    that aggregate (already multiplied by the local mask if one is applied
    after merging). Positions no contributor keeps have zero derivative.
    """
    if target not in raw:
        raise KeyError(f"target {target} is not among the contributors")
    keys = list(raw)
    values = np.stack([models[k] for k in keys])
    o = np.stack([masks[k] for k in keys]).astype(np.float64)
    w = np.array([raw[k] for k in keys])
    den = w @ o
    agg = kernels.masked_average(values, o, w, np.zeros(values.shape[1]))
    j = keys.index(target)
    ok = den > 0
    contrib = np.zeros_like(den)
    contrib[ok] = o[j, ok] * (values[j, ok] - agg[ok]) / den[ok]
    dimp_dlam = s_j / (np.sqrt(delta_t) * loss_j)
    return dimp_dlam * float(g @ contrib)


def update_control(lambda_prev, grad, eta_lambda, lo=LAMBDA_MIN, hi=LAMBDA_MAX):
    return float(np.clip(lambda_prev - eta_lambda * grad, lo, hi))


def aggregate_masked(local, local_mask, cached, weights, self_index):
    """Merge the local model with cached models, parameter by parameter.

    Each parameter is the weighted mean over the contributors whose mask keeps
    it. Where nobody keeps it the local value is returned unchanged. The
    caller applies the local mask afterwards.
    """
    K = local.shape[0]
    for c in cached:
        if c.params.shape != (K,) or c.mask.shape != (K,):
            raise ValueError(f"cached model from {c.sender} has wrong length")
    values = np.stack([local] + [c.params for c in cached])
    masks = np.stack([local_mask] + [c.mask for c in cached]).astype(np.float64)
    w = np.array([weights[self_index]] + [weights[c.sender] for c in cached])
    return kernels.masked_average(values, masks, w, local)


@dataclass
class RoundParams:
    lr: float = 0.03
    epochs: int = 4
    batch_size: int = 50
    eta_lambda: float = 0.01
    dynamic_weights: bool = True
    control_grad: str = "exact"


@dataclass
class RoundResult:
    params: np.ndarray
    full: np.ndarray
    weights: dict
    sgd_params: np.ndarray
    sgd_loss: float
    own_loss: float
    round_loss: float
    last_batch: Optional[Batch]
    control_grads: dict


def _raw_importances(state, self_index, s_i, own_loss, cached, t):
    raw = {self_index: importance(s_i, state.lam(self_index), 1, own_loss)}
    for c in cached:
        raw[c.sender] = importance(c.sender_samples, state.lam(c.sender), c.staleness(t), c.loss_value())
    return raw


def aggregation_round(arch, params, mask, x, y, cached, state, t, s_i, hp, rng):
    """One local update body: SGD, control/weight update, masked merge.

    ``cached`` are the selected neighbour snapshots, ``t`` the device's local
    update counter used for staleness, ``s_i`` its sample count. ``state`` is
    updated in place.
    """
    i = state.self_index
    half, last, sgd_loss = local_sgd(arch, params, mask, x, y, hp.lr, hp.epochs, hp.batch_size, rng)
    own_loss = max(loss(arch, half, mask, last), LOSS_FLOOR)
    grads = {}
    if not cached:
        state.raw = {i: 1.0}
        state.weights = {i: 1.0}
        return RoundResult(half, half.copy(), dict(state.weights), half, sgd_loss, own_loss,
                           own_loss, last, grads)

    if hp.dynamic_weights:
        raw = _raw_importances(state, i, s_i, own_loss, cached, t)
        if hp.eta_lambda > 0:
            w_old = normalize_weights(raw)
            probe = effective(aggregate_masked(half, mask, cached, w_old, i), mask)
            g = loss_and_gradient(arch, probe, None, last)[1] * mask
            models = {i: half, **{c.sender: c.params for c in cached}}
            masks = {i: mask, **{c.sender: c.mask for c in cached}}
            meta = {i: (s_i, 1, own_loss), **{c.sender: (c.sender_samples, c.staleness(t), c.loss_value()) for c in cached}}
            for k in raw:
                s_k, dt_k, loss_k = meta[k]
                if hp.control_grad == "exact":
                    grads[k] = control_gradient(g, models, masks, raw, k, s_k, dt_k, loss_k)
                else:
                    grads[k] = control_gradient_own_term(g, models[k], raw, k, s_k, dt_k, loss_k)
            for k, gk in grads.items():
                state.lambdas[k] = update_control(state.lam(k), gk, hp.eta_lambda)
            raw = _raw_importances(state, i, s_i, own_loss, cached, t)
        weights = normalize_weights(raw)
    else:
        raw = {k: 1.0 for k in [i] + [c.sender for c in cached]}
        weights = normalize_weights(raw)
    state.raw = raw
    state.weights = weights
    full = aggregate_masked(half, mask, cached, weights, i)
    new = effective(full, mask).copy()
    round_loss = max(loss(arch, new, None, last), LOSS_FLOOR)
    return RoundResult(new, full, dict(weights), half, sgd_loss, own_loss, round_loss, last, grads)
