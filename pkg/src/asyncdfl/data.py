"""Synthetic classification data and non-IID device partitions."""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, PartitionError

TEST_FRACTION = 0.2


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    n_classes: int

    @property
    def dims(self):
        return self.x_train.shape[1]


@dataclass
class DevicePartition:
    indices: list
    n_classes: int

    @property
    def counts(self):
        return [len(ix) for ix in self.indices]

    @property
    def total(self):
        return sum(self.counts)

    def class_histograms(self, y):
        return np.array([np.bincount(y[ix], minlength=self.n_classes) for ix in self.indices])


def generate_synthetic_dataset(n_classes, dims, n_samples, cluster_spread, rng):
    """Gaussian class clusters; 20% of the samples are held out for testing.

    Class means are standard normal vectors; each sample is its class mean plus
    isotropic noise of standard deviation ``cluster_spread``.
    """
    if n_classes < 2 or dims < 2:
        raise ConfigError("need n_classes >= 2 and dims >= 2")
    if n_samples < 2 or cluster_spread < 0:
        raise ConfigError("need n_samples >= 2 and cluster_spread >= 0")
    means = rng.standard_normal((n_classes, dims))
    y = rng.integers(n_classes, size=n_samples)
    x = means[y] + cluster_spread * rng.standard_normal((n_samples, dims))
    n_test = max(1, int(round(TEST_FRACTION * n_samples)))
    order = rng.permutation(n_samples)
    tr, te = order[n_test:], order[:n_test]
    return Dataset(x[tr], y[tr], x[te], y[te], n_classes)


def lognormal_counts(total, n, sigma, rng):
    """Per-device sample counts, lognormal with mean ``total / n``.

    ``sigma`` is the standard deviation of the underlying normal. Counts are
    rounded, floored at 1 and scaled down if their sum exceeds ``total``.
    """
    if n < 1 or total < n:
        raise PartitionError(f"cannot give {n} devices at least one of {total} samples")
    mu = np.log(total / n) - 0.5 * sigma**2
    raw = rng.lognormal(mu, sigma, size=n)
    if raw.sum() > total:
        raw *= total / raw.sum()
    counts = np.maximum(1, np.floor(raw).astype(int))
    while counts.sum() > total:
        counts[np.argmax(counts)] -= 1
    return counts.tolist()


def _largest_remainder(q, count):
    target = q * count
    base = np.floor(target).astype(int)
    short = count - base.sum()
    if short > 0:
        order = np.argsort(-(target - base), kind="stable")
        base[order[:short]] += 1
    return base


def dirichlet_partition(y, n, alpha, counts, rng, n_classes=None):
    """Assign disjoint sample index sets with Dirichlet(alpha) class mixtures.

    Devices are filled in index order. Device ``i`` draws class proportions
    ``q ~ Dir(alpha)`` and asks for ``round(q * counts[i])`` samples per class
    (largest-remainder rounding). When a class pool runs dry the shortfall is
    taken from the remaining classes in descending order of ``q``.
    """
    y = np.asarray(y)
    n_classes = int(n_classes if n_classes is not None else y.max() + 1)
    if alpha <= 0:
        raise PartitionError(f"alpha must be > 0, got {alpha}")
    if len(counts) != n:
        raise PartitionError(f"{len(counts)} counts for {n} devices")
    if min(counts) < 1 or sum(counts) > len(y):
        raise PartitionError(f"counts {sum(counts)} infeasible for {len(y)} samples")
    pools = [list(rng.permutation(np.flatnonzero(y == c))) for c in range(n_classes)]
    indices = []
    for i in range(n):
        q = rng.dirichlet(np.full(n_classes, alpha))
        want = _largest_remainder(q, counts[i])
        take = np.minimum(want, [len(p) for p in pools])
        deficit = counts[i] - take.sum()
        for c in np.argsort(-q, kind="stable"):
            if deficit == 0:
                break
            extra = min(deficit, len(pools[c]) - take[c])
            take[c] += extra
            deficit -= extra
        chosen = []
        for c in range(n_classes):
            chosen.extend(pools[c][:take[c]])
            del pools[c][:take[c]]
        indices.append(np.sort(np.asarray(chosen, dtype=np.int64)))
    return DevicePartition(indices, n_classes)


def mean_tv_distance(part, y):
    """Mean total-variation distance of device class mixes from the global mix."""
    hist = part.class_histograms(y).astype(float)
    glob = np.bincount(y, minlength=part.n_classes).astype(float)
    glob /= glob.sum()
    local = hist / hist.sum(axis=1, keepdims=True)
    return float(0.5 * np.abs(local - glob).sum(axis=1).mean())


def save_dataset(path, ds):
    """Store as ``.npz`` with arrays x_train, y_train, x_test, y_test, n_classes."""
    np.savez(path, x_train=ds.x_train, y_train=ds.y_train, x_test=ds.x_test,
             y_test=ds.y_test, n_classes=np.int64(ds.n_classes))


def load_dataset(path):
    with np.load(path) as f:
        return Dataset(f["x_train"], f["y_train"], f["x_test"], f["y_test"], int(f["n_classes"]))
