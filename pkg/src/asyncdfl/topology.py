"""Static communication topologies.

``adjacency[i, j] > 0`` means device ``j`` may send its model to device ``i``:
device ``i`` caches and aggregates ``j``'s model, and ``j`` diffuses to ``i``.
"""

from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

KINDS = ("exponential", "ring", "star")


@dataclass(frozen=True)
class TopologyMatrix:
    n: int
    adjacency: np.ndarray
    kind: str

    def __post_init__(self):
        self.adjacency.setflags(write=False)


def exponential_offsets(n):
    """Offsets ``2**k < n``, ascending."""
    offsets = []
    k = 1
    while k < n:
        offsets.append(k)
        k *= 2
    return offsets


def _offsets(kind, n):
    if kind == "exponential":
        return exponential_offsets(n)
    if kind == "ring":
        return sorted({1, n - 1})
    raise AssertionError(kind)


def build_topology(kind, n):
    """Row-normalized adjacency of the requested kind.

    Exponential: ``j`` feeds ``i`` iff ``i = j + 2**k (mod n)``. Ring links each
    device to both nearest neighbours; star links every device to hub 0.
    Every positive entry of a row equals ``1 / (degree + 1)``.
    """
    if kind not in KINDS:
        raise ConfigError(f"unknown topology kind {kind!r}; expected one of {KINDS}")
    if not isinstance(n, (int, np.integer)) or n < 2:
        raise ConfigError(f"topology needs n >= 2 devices, got {n!r}")
    n = int(n)
    adj = np.zeros((n, n))
    if kind == "star":
        adj[0, 1:] = 1.0
        adj[1:, 0] = 1.0
    else:
        for off in _offsets(kind, n):
            for j in range(n):
                adj[(j + off) % n, j] = 1.0
    np.fill_diagonal(adj, 1.0)
    adj /= adj.sum(axis=1, keepdims=True)
    return TopologyMatrix(n=n, adjacency=adj, kind=kind)


def _check_index(W, i):
    if not 0 <= i < W.n:
        raise IndexError(f"device index {i} out of range for n={W.n}")


def _by_offset(W, i, members, sign):
    # ascending (sign * (member - i)) mod n
    return sorted(members, key=lambda j: (sign * (j - i)) % W.n)


def neighbors_of(W, i):
    """Devices whose models device ``i`` caches and aggregates.

    Ordered by ascending offset ``(i - j) mod n``.
    """
    _check_index(W, i)
    row = W.adjacency[i]
    members = [j for j in range(W.n) if j != i and row[j] > 0]
    return _by_offset(W, i, members, -1)


def diffusion_targets(W, i):
    """Devices that cache device ``i``'s model, ordered by ``(j - i) mod n``."""
    _check_index(W, i)
    col = W.adjacency[:, i]
    members = [j for j in range(W.n) if j != i and col[j] > 0]
    return _by_offset(W, i, members, +1)


def sample_diffusion_target(W, i, rng):
    """Uniform draw from :func:`diffusion_targets`."""
    targets = diffusion_targets(W, i)
    return targets[int(rng.integers(len(targets)))]


def is_connected(W):
    """BFS over the undirected union of both link directions."""
    und = (W.adjacency > 0) | (W.adjacency.T > 0)
    seen = {0}
    queue = deque([0])
    while queue:
        u = queue.popleft()
        for v in np.flatnonzero(und[u]):
            v = int(v)
            if v not in seen:
                seen.add(v)
                queue.append(v)
    return len(seen) == W.n


def to_csv(W):
    """Adjacency as CSV text, one row per device."""
    lines = [",".join(repr(float(v)) for v in row) for row in W.adjacency]
    return "\n".join(lines) + "\n"
