"""Hessian-guided adaptive sparse training.

Pruning a set ``p`` of parameters moves them to zero (``dm_p = -m_p``); the
remaining parameters ``r`` take the second-order optimal compensation

    dm_r = H_rr^{-1} (H_rp m_p - g_r)

and the second-order change of the loss is the closed form in
:func:`loss_impact`. Candidates are ranked by a blend of that loss change and
the induced change of the gradient; the pruning rate comes from a spectral-gap
test on the Hessian against a Lipschitz estimate of the gradient's departure
from its linearization, mixed with the neighbours' rates.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg as sla
from scipy.sparse.linalg import LinearOperator, eigsh


def _split(K, pruned):
    pruned = np.asarray(sorted(set(int(q) for q in np.atleast_1d(pruned))), dtype=np.int64)
    keep = np.ones(K, dtype=bool)
    keep[pruned] = False
    return pruned, np.flatnonzero(keep)


def _blocks(H, p, r):
    return H[np.ix_(p, p)], H[np.ix_(p, r)], H[np.ix_(r, p)], H[np.ix_(r, r)]


def _solve_rr(Hrr, rhs, ridge):
    A = Hrr + ridge * np.eye(Hrr.shape[0]) if ridge else Hrr
    try:
        return sla.solve(A, rhs, assume_a="sym")
    except (sla.LinAlgError, ValueError) as exc:
        cond = np.linalg.cond(A) if A.size else 0.0
        raise np.linalg.LinAlgError(f"remaining-parameter Hessian block is singular (cond={cond:.3g})") from exc


def remaining_adjustment(H, g, params, pruned, ridge=0.0):
    """Optimal change of the kept parameters when ``pruned`` are zeroed."""
    p, r = _split(len(params), pruned)
    _, _, Hrp, Hrr = _blocks(H, p, r)
    return _solve_rr(Hrr, Hrp @ params[p] - g[r], ridge)


def full_adjustment(H, g, params, pruned, ridge=0.0):
    """The whole perturbation: ``-m`` on pruned positions, compensation elsewhere."""
    p, r = _split(len(params), pruned)
    dm = np.zeros(len(params))
    dm[p] = -params[p]
    if len(r):
        dm[r] = remaining_adjustment(H, g, params, p, ridge)
    return dm


def loss_impact(H, g, params, pruned, ridge=0.0):
    """Closed-form second-order loss change of pruning ``pruned``.

    ``1/2 m_p' H_pp m_p - g_p' m_p - 1/2 m_p' H_pr Hrr^-1 H_rp m_p
    - 1/2 g_r' Hrr^-1 g_r + g_r' Hrr^-1 H_rp m_p``; ``ridge`` is added to the
    diagonal of ``H_rr`` only.
    """
    p, r = _split(len(params), pruned)
    Hpp, Hpr, Hrp, Hrr = _blocks(H, p, r)
    mp, gp, gr = params[p], g[p], g[r]
    a = _solve_rr(Hrr, Hrp @ mp, ridge) if len(r) else np.zeros(0)
    b = _solve_rr(Hrr, gr, ridge) if len(r) else np.zeros(0)
    return float(0.5 * mp @ Hpp @ mp - gp @ mp - 0.5 * mp @ Hpr @ a - 0.5 * gr @ b + gr @ a)


def quadratic_change(H, g, dm):
    """Second-order Taylor change ``g'dm + 1/2 dm' H dm``."""
    return float(g @ dm + 0.5 * dm @ H @ dm)


def lambda_g_schedule(g_norm, g_norm_max, C):
    """Exploration weight ``min(1, |g| / (C |g|_max))``."""
    if g_norm_max <= 0 or C <= 0:
        raise ValueError("g_norm_max and C must be positive")
    return float(np.clip(g_norm / (C * g_norm_max), 0.0, 1.0))


def _grad_norm_sq(g):
    gg = float(g @ g)
    if gg == 0.0:
        raise ValueError("gradient-change term needs a nonzero gradient (or lambda_g = 0)")
    return gg


def blended_score(H, g, F_now, params, pruned, lambda_g, ridge=0.0):
    """``(1 - lg) |dF_C| / |F| + lg |H dm| / |g|`` for one candidate set.

    ``dm`` is the full perturbation of :func:`full_adjustment`, so ``H dm`` is
    the first-order change of the gradient caused by the pruning step.
    """
    dm = full_adjustment(H, g, params, pruned, ridge)
    _, r = _split(len(params), pruned)
    H_eff = H.copy()
    H_eff[r, r] += ridge
    score = (1.0 - lambda_g) * abs(loss_impact(H, g, params, pruned, ridge)) / abs(F_now)
    if lambda_g > 0:
        score += lambda_g * float(np.linalg.norm(H_eff @ dm)) / np.sqrt(_grad_norm_sq(g))
    return score


def single_parameter_scores(H, g, params, F_now, lambda_g):
    """Blended score of pruning each parameter alone, for all parameters at once.

    ``H`` must be positive definite (regularize before calling). With
    ``B = H^-1``, ``u = B g`` and ``nu_q = (u_q - m_q) / B_qq`` the loss change
    of pruning ``q`` is ``-1/2 g'u + 1/2 nu_q^2 B_qq`` and the gradient change
    is ``-g + nu_q e_q``. Returns ``(scores, loss_changes)``.
    """
    c, low = sla.cho_factor(H)
    B = sla.cho_solve((c, low), np.eye(len(g)))
    B = 0.5 * (B + B.T)
    u = B @ g
    bqq = np.diag(B)
    nu = (u - params) / bqq
    dF = -0.5 * float(g @ u) + 0.5 * nu * nu * bqq
    scores = (1.0 - lambda_g) * np.abs(dF) / abs(F_now)
    if lambda_g > 0:
        gg = _grad_norm_sq(g)
        scores = scores + lambda_g * np.sqrt(np.maximum(gg - 2.0 * g * nu + nu * nu, 0.0)) / np.sqrt(gg)
    return scores, dF


def regularize(H, eigs=None, rel=1e-6):
    """Shift ``H`` to be positive definite: ridge ``rel * |tr H| / K`` past its lowest eigenvalue."""
    K = H.shape[0]
    eps = rel * abs(np.trace(H)) / K or rel
    lo = float(eigs[0]) if eigs is not None else float(sla.eigvalsh(H, subset_by_index=[0, 0])[0])
    shift = eps + max(0.0, -lo)
    return H + shift * np.eye(K), shift


def lossless_pruning_rate(eigs, L, d=None):
    """``p / d`` for the first 1-based index ``p`` with ``eig[p+1] - eig[p] > 4 L``.

    ``eigs`` must be ascending. Returns 0 if no gap qualifies.
    """
    eigs = np.asarray(eigs, dtype=np.float64)
    if eigs.size == 0:
        raise ValueError("empty eigenvalue list")
    d = len(eigs) if d is None else d
    gaps = np.diff(eigs)
    hit = np.flatnonzero(gaps > 4.0 * L)
    if hit.size == 0:
        return 0.0
    return float(hit[0] + 1) / d


def _sym_norm(op, K, dense_limit, v0):
    """Spectral norm of a symmetric operator given by its products."""
    if K <= dense_limit:
        A = op(np.eye(K))
        return float(np.max(np.abs(sla.eigvalsh(0.5 * (A + A.T)))))
    lin = LinearOperator((K, K), matvec=op, dtype=np.float64)
    return float(abs(eigsh(lin, k=1, which="LM", v0=v0, return_eigenvectors=False)[0]))


def lipschitz_estimate(hvp_at, m, probes, radius, rng, dense_limit=64):
    """Lipschitz constant of the linearization residual over a ball around ``m``.

    The residual ``r(dm) = H(m) dm - (grad(m + dm) - grad(m))`` has Jacobian
    ``H(m) - H(m + dm)``, so its Lipschitz constant on the ball is the largest
    spectral norm of that difference. The estimate is the maximum over
    ``probes`` points drawn uniformly on the sphere of the given radius.
    This is the pairwise quotient ``|r(u) - r(v)| / |u - v|`` in the limit of
    close pairs taken along the worst direction at each probe.
    ``hvp_at(point, V)`` returns ``H(point) @ V`` for a vector or matrix ``V``.
    Probe ``k`` depends only on the first ``k`` draws, so more probes never
    lower the estimate.
    """
    if probes < 2:
        raise ValueError("need at least two probes")
    K = len(m)
    best = 0.0
    for _ in range(probes):
        d = rng.standard_normal(K)
        d *= radius / np.linalg.norm(d)
        point = m + d
        v0 = rng.standard_normal(K) if K > dense_limit else None
        best = max(best, _sym_norm(lambda V: hvp_at(point, V) - hvp_at(m, V), K, dense_limit, v0))
    return best


def top_eigenvalues(hvp_fn, K, k=64, v0=None):
    """Largest ``k`` Hessian eigenvalues (ascending) by Lanczos on products.

    Pass a start vector ``v0`` for reproducible results; ARPACK otherwise
    draws its own.
    """
    op = LinearOperator((K, K), matvec=hvp_fn, dtype=np.float64)
    if v0 is None:
        v0 = np.ones(K) / np.sqrt(K)
    vals = eigsh(op, k=min(k, K - 1), which="LA", v0=v0, return_eigenvectors=False)
    return np.sort(vals)


def aggregate_pruning_rate(own, neighbor_rates, weights, self_index, p_max=0.8):
    """Weighted mix of the device's own rate and the neighbours' rates, clipped to ``[0, p_max]``."""
    total = weights[self_index] * own
    for j, pj in neighbor_rates.items():
        total += weights[j] * pj
    return float(np.clip(total, 0.0, p_max))


def prune_mask(scores, rate):
    """Mask dropping the ``floor(K * rate)`` lowest-scoring parameters (stable order)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"pruning rate must lie in [0, 1), got {rate}")
    K = len(scores)
    n_prune = int(np.floor(K * rate))
    mask = np.ones(K)
    mask[np.argsort(scores, kind="stable")[:n_prune]] = 0.0
    return mask


@dataclass
class PruningState:
    """Per-device pruning bookkeeping."""

    C: float = 1.5
    cadence: int = 5
    p_max: float = 0.8
    rate: float = 0.0
    own_rate: float = 0.0
    lipschitz: float = 0.0
    lambda_g: float = 0.0
    grad_norm_max: float = 0.0
    initial: Optional[np.ndarray] = None
    drift: float = 0.0

    def due(self, t):
        return self.cadence > 0 and t > 0 and t % self.cadence == 0


@dataclass
class PruneReport:
    mask: np.ndarray
    own_rate: float
    rate: float
    lambda_g: float
    lipschitz: float
    density: float
    predicted: float
    scores: np.ndarray


def adaptive_prune(H, g, F_now, base, rate, lambda_g, eigs=None, damping=1e-6):
    """Rank every parameter of the whole model by its single-parameter score.

    ``H`` is shifted by :func:`regularize` with ``rel=damping`` before scoring.
    Returns ``(mask, scores, predicted_total)``; ``predicted_total`` is the
    closed-form loss change of pruning the selected set jointly.
    """
    K = len(base)
    if rate == 0.0:
        return np.ones(K), np.zeros(K), 0.0
    H_pd, _ = regularize(H, eigs, rel=damping)
    scores, _ = single_parameter_scores(H_pd, g, base, F_now, lambda_g)
    mask = prune_mask(scores, rate)
    pruned = np.flatnonzero(mask == 0)
    predicted = loss_impact(H_pd, g, base, pruned) if len(pruned) else 0.0
    return mask, scores, predicted
