"""Learned neighbour-model selection.

A small LSTM walks over the cached neighbour models in ascending device order.
Each step reads three features (already aggregated, normalized staleness,
normalized sender loss) and emits, through two fully connected layers and a
sigmoid, the probability of selecting that model. The policy is trained online
with REINFORCE using the device's training loss as the reward signal and a
moving average of recent losses as baseline.
"""

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

logger = logging.getLogger(__name__)

N_FEATURES = 3
LOGIT_CLIP = 30.0


def _layout(h):
    return [
        ("wx", (4 * h, N_FEATURES)),
        ("wh", (4 * h, h)),
        ("b", (4 * h,)),
        ("w1", (h, h)),
        ("b1", (h,)),
        ("w2", (h,)),
        ("b2", (1,)),
    ]


def policy_size(hidden):
    return sum(int(np.prod(s)) for _, s in _layout(hidden))


@dataclass
class PriorityNetwork:
    hidden: int = 8
    theta: np.ndarray = None

    def __post_init__(self):
        if self.theta is None:
            self.theta = np.zeros(policy_size(self.hidden))
        if self.theta.shape != (policy_size(self.hidden),):
            raise ValueError("parameter vector does not match hidden size")

    @classmethod
    def random(cls, hidden, rng, scale=None):
        """Uniform init in ``[-scale, scale]``; the default ``1/sqrt(hidden)`` is the usual LSTM choice."""
        scale = 1.0 / np.sqrt(hidden) if scale is None else scale
        return cls(hidden, rng.uniform(-scale, scale, policy_size(hidden)))

    def unpack(self, theta=None):
        theta = self.theta if theta is None else theta
        out, off = {}, 0
        for name, shape in _layout(self.hidden):
            n = int(np.prod(shape))
            out[name] = theta[off:off + n].reshape(shape)
            off += n
        return out

    def copy(self):
        return PriorityNetwork(self.hidden, self.theta.copy())


def _forward(net, X, theta=None):
    """Batched pass over sequences ``X`` of shape (B, M, 3)."""
    P = net.unpack(theta)
    h_dim = net.hidden
    B, M, _ = X.shape
    h = np.zeros((B, h_dim))
    c = np.zeros((B, h_dim))
    cache = []
    probs = np.empty((B, M))
    for t in range(M):
        z = X[:, t] @ P["wx"].T + h @ P["wh"].T + P["b"]
        ig = expit(z[:, :h_dim])
        fg = expit(z[:, h_dim:2 * h_dim])
        gg = np.tanh(z[:, 2 * h_dim:3 * h_dim])
        og = expit(z[:, 3 * h_dim:])
        c_new = fg * c + ig * gg
        tc = np.tanh(c_new)
        h_new = og * tc
        u = np.tanh(h_new @ P["w1"].T + P["b1"])
        s = np.clip(u @ P["w2"] + P["b2"][0], -LOGIT_CLIP, LOGIT_CLIP)
        probs[:, t] = expit(s)
        cache.append((X[:, t], h, c, ig, fg, gg, og, c_new, tc, h_new, u))
        h, c = h_new, c_new
    return probs, cache


def _backward(net, cache, ds, theta=None):
    """Gradient w.r.t. theta given d(objective)/d(logit) ``ds`` of shape (B, M)."""
    P = net.unpack(theta)
    G = {k: np.zeros_like(v) for k, v in P.items()}
    h_dim = net.hidden
    B = ds.shape[0]
    dh_next = np.zeros((B, h_dim))
    dc_next = np.zeros((B, h_dim))
    for t in reversed(range(len(cache))):
        x, h_prev, c_prev, ig, fg, gg, og, c_new, tc, h_new, u = cache[t]
        d = ds[:, t]
        G["w2"] += u.T @ d
        G["b2"] += d.sum()
        dpre = np.outer(d, P["w2"]) * (1.0 - u * u)
        G["w1"] += dpre.T @ h_new
        G["b1"] += dpre.sum(0)
        dh = dpre @ P["w1"] + dh_next
        dc = dc_next + dh * og * (1.0 - tc * tc)
        dz = np.hstack([
            dc * gg * ig * (1.0 - ig),
            dc * c_prev * fg * (1.0 - fg),
            dc * ig * (1.0 - gg * gg),
            dh * tc * og * (1.0 - og),
        ])
        G["wx"] += dz.T @ x
        G["wh"] += dz.T @ h_prev
        G["b"] += dz.sum(0)
        dh_next = dz @ P["wh"]
        dc_next = dc * fg
    return np.concatenate([G[name].ravel() for name, _ in _layout(h_dim)])


def _as_sequence(features):
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != N_FEATURES or X.shape[0] < 1:
        raise ValueError(f"expected (neighbors, {N_FEATURES}) features, got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite selection features")
    return X[None]


def priority_forward(net, features):
    """Selection probability for each neighbour, in the given order."""
    return _forward(net, _as_sequence(features))[0][0]


def log_prob_gradient(net, features, actions):
    """``(sum_m log P(c_m), its gradient w.r.t. theta)`` for realized actions."""
    X = _as_sequence(features)
    a = np.asarray(actions, dtype=np.float64)[None]
    probs, cache = _forward(net, X)
    p = np.clip(probs, 1e-300, None)
    q = np.clip(1.0 - probs, 1e-300, None)
    value = float(np.sum(a * np.log(p) + (1 - a) * np.log(q)))
    return value, _backward(net, cache, a - probs)


def select_models(probs, rng, mode="sample"):
    """Turn probabilities into a subset.

    Returns ``(selected positions, actions)`` where ``actions`` is the 0/1
    vector over all neighbours.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if mode == "sample":
        actions = (rng.random(len(probs)) < probs).astype(np.int64)
    elif mode == "threshold":
        actions = (probs >= 0.5).astype(np.int64)
    else:
        raise ValueError(f"unknown selection mode {mode!r}")
    return [int(k) for k in np.flatnonzero(actions)], actions


def reinforce_update(net, features, actions, reward, baseline, eta_prime, clip=10.0):
    """Score-function step ``theta -= eta' * (reward - baseline) * grad sum log P``.

    The reward is a loss, so actions followed by a below-baseline loss become
    more likely. The step is rescaled if its norm exceeds ``clip``.
    """
    adv = reward - baseline
    if adv == 0.0 or eta_prime == 0.0:
        return net
    _, g = log_prob_gradient(net, features, actions)
    step = eta_prime * adv * g
    norm = float(np.linalg.norm(step))
    if not np.isfinite(norm):
        logger.warning("non-finite policy step skipped")
        return net
    if norm > clip:
        step *= clip / norm
    return PriorityNetwork(net.hidden, net.theta - step)


@dataclass
class RewardTracker:
    window: int = 10
    history: deque = field(default_factory=deque)

    def baseline(self, default):
        return float(np.mean(self.history)) if self.history else default

    def push(self, value):
        self.history.append(float(value))
        while len(self.history) > self.window:
            self.history.popleft()


@dataclass
class FeatureScaler:
    """Running-max normalizers for staleness and sender loss."""

    max_staleness: float = 1.0
    max_loss: float = 1e-8

    def features(self, aggregated, staleness, losses):
        staleness = np.asarray(staleness, dtype=np.float64)
        losses = np.asarray(losses, dtype=np.float64)
        if len(staleness):
            self.max_staleness = max(self.max_staleness, float(staleness.max()))
            self.max_loss = max(self.max_loss, float(losses.max()))
        return np.column_stack([
            np.asarray(aggregated, dtype=np.float64),
            staleness / self.max_staleness,
            losses / self.max_loss,
        ])


def heuristic_batch(rng, batch, length, threshold=1.5):
    """Synthetic (features, labels) pairs encoding the selection heuristics.

    A model already aggregated is labelled 0. Otherwise the label is 1 when
    ``staleness + loss < threshold`` (both normalized to [0, 1]), so only
    models that are both stale and poor are skipped.
    """
    agg = (rng.random((batch, length)) < 0.3).astype(np.float64)
    stal = rng.random((batch, length))
    lossv = rng.random((batch, length))
    X = np.stack([agg, stal, lossv], axis=-1)
    labels = ((agg == 0) & (stal + lossv < threshold)).astype(np.float64)
    return X, labels


def pretrain_with_heuristics(net, rng, steps=3000, batch=32, max_len=8, lr=0.01, target_bce=0.3):
    """Supervised warm start on :func:`heuristic_batch` data with Adam.

    Stops once the running binary cross-entropy drops below ``target_bce``
    (after a short burn-in), otherwise returns the best parameters seen.
    """
    theta = net.theta.copy()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    b1, b2, eps = 0.9, 0.999, 1e-8
    best, best_bce = theta.copy(), np.inf
    ema = None
    for step in range(1, steps + 1):
        X, y = heuristic_batch(rng, batch, int(rng.integers(1, max_len + 1)))
        probs, cache = _forward(net, X, theta)
        p = np.clip(probs, 1e-12, 1 - 1e-12)
        bce = float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))
        ema = bce if ema is None else 0.95 * ema + 0.05 * bce
        if ema < best_bce:
            best, best_bce = theta.copy(), ema
        if step > 200 and ema < target_bce:
            break
        g = -_backward(net, cache, (y - probs) / y.size, theta)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1**step)) / (np.sqrt(v / (1 - b2**step)) + eps)
    else:
        logger.warning("policy pretraining stopped at step cap with BCE %.3f", best_bce)
        theta = best
    return PriorityNetwork(net.hidden, theta)


def save_policy(path, net):
    """Text file: one header line, then one parameter per line."""
    with open(path, "w") as f:
        f.write(f"# asyncdfl-policy v1 hidden={net.hidden} size={net.theta.size}\n")
        for v in net.theta:
            f.write(f"{float(v)!r}\n")


def load_policy(path):
    with open(path) as f:
        header = f.readline().split()
        if header[:3] != ["#", "asyncdfl-policy", "v1"]:
            raise ValueError(f"{path}: not a policy file")
        meta = dict(item.split("=") for item in header[3:])
        theta = np.array([float(line) for line in f if line.strip()])
    if theta.size != int(meta["size"]):
        raise ValueError(f"{path}: expected {meta['size']} values, found {theta.size}")
    return PriorityNetwork(int(meta["hidden"]), theta)
