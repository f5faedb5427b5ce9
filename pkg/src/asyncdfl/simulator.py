"""Deterministic discrete-event simulation of asynchronous decentralized training.

Time is simulated. Each device loops: read a snapshot of its neighbour cache,
select models, run local SGD and the weighted merge, occasionally prune, then
send a copy of its model to one random out-neighbour. The whole update is
computed from the snapshot taken when it starts and becomes visible when its
completion event fires; arrivals in between replace cache entries but cannot
touch the update in flight.

Events are ordered by ``(time, seq)``; ``seq`` is a global counter, so runs
with the same configuration replay identically.
"""

import csv
import hashlib
import heapq
import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .aggregation import CachedModel, RoundParams, WeightState, aggregation_round
from .config import SCHEMA_VERSION, RunConfig, to_dict
from .data import dirichlet_partition, generate_synthetic_dataset, lognormal_counts
from .errors import ConfigError, NumericError
from .model import Arch, Batch, accuracy, flops_estimate, gradient, hessian, hvp, local_sgd, loss
from .pruning import (
    PruningState,
    adaptive_prune,
    aggregate_pruning_rate,
    lambda_g_schedule,
    lipschitz_estimate,
    lossless_pruning_rate,
    top_eigenvalues,
)
from .selection import (
    FeatureScaler,
    PriorityNetwork,
    RewardTracker,
    priority_forward,
    pretrain_with_heuristics,
    reinforce_update,
    select_models,
)
from .topology import build_topology, sample_diffusion_target

logger = logging.getLogger(__name__)

METRIC_COLUMNS = [
    "sim_time", "device", "t_i", "train_loss", "test_acc_self", "test_acc_avg",
    "density", "consensus_global", "bytes_sent_cum", "flops_cum",
]
PRUNE_COLUMNS = [
    "round", "device", "own_rate", "rate", "lambda_g", "lipschitz", "density",
    "predicted_dloss", "realized_dloss",
]
METADATA_BYTES = 64
ALL_DEVICES = -1

UPDATE_DONE, ARRIVAL, HEARTBEAT, EVAL, BARRIER = range(5)


@dataclass(frozen=True)
class DiffusionPayload:
    sender: int
    sent_at: int
    params: np.ndarray
    mask: np.ndarray
    loss: float
    samples: int
    rate: float

    def nbytes(self):
        """4 bytes per kept parameter, a 1-bit-per-parameter mask, fixed metadata."""
        return 4 * int(np.count_nonzero(self.mask)) + math.ceil(self.mask.size / 8) + METADATA_BYTES


def payload_bytes(mask):
    return 4 * int(np.count_nonzero(mask)) + math.ceil(mask.size / 8) + METADATA_BYTES


class Coordinator:
    """Hands out device indices and records heartbeats; never sees model state."""

    def __init__(self):
        self._next = 0
        self.last_seen = {}

    def register(self):
        idx = self._next
        self._next += 1
        self.last_seen[idx] = 0.0
        return idx

    def heartbeat(self, device, now):
        if device not in self.last_seen:
            raise KeyError(f"device {device} is not registered")
        self.last_seen[device] = now

    def liveness(self, now, timeout):
        """``{device: True if seen within timeout}``."""
        return {d: (now - t) <= timeout for d, t in sorted(self.last_seen.items())}

    def state_hash(self):
        blob = json.dumps({"next": self._next, "seen": sorted(self.last_seen.items())})
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class DeviceState:
    index: int
    params: np.ndarray
    mask: np.ndarray
    initial: np.ndarray
    x: np.ndarray
    y: np.ndarray
    speed: float
    train_rng: np.random.Generator
    select_rng: np.random.Generator
    diffuse_rng: np.random.Generator
    probe_rng: np.random.Generator
    weights: WeightState
    pruning: PruningState
    policy: Optional[PriorityNetwork] = None
    rewards: RewardTracker = field(default_factory=RewardTracker)
    scaler: FeatureScaler = field(default_factory=FeatureScaler)
    t: int = 0
    cache: dict = field(default_factory=dict)
    last_loss: float = float("nan")
    flops_cum: int = 0
    bytes_sent: int = 0
    reaggregations: int = 0
    pending: Optional[dict] = None
    finished: bool = False

    @property
    def samples(self):
        return len(self.y)


@dataclass
class MetricsLog:
    rows: list
    summary: dict
    prune_rows: list = field(default_factory=list)

    def to_csv(self):
        return _csv_text(METRIC_COLUMNS, self.rows)

    def write(self, directory):
        import os

        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, "metrics.csv"), "w", newline="") as f:
            f.write(self.to_csv())
        with open(os.path.join(directory, "summary.json"), "w") as f:
            json.dump(self.summary, f, indent=2, sort_keys=True)
            f.write("\n")
        if self.prune_rows:
            with open(os.path.join(directory, "pruning.csv"), "w", newline="") as f:
                f.write(_csv_text(PRUNE_COLUMNS, self.prune_rows))

    def aggregate_rows(self):
        return [r for r in self.rows if r["device"] == ALL_DEVICES]


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _csv_text(columns, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def time_to_target(rows, target):
    """First logged time with average-model accuracy >= target, else ``"/"``."""
    for r in rows:
        if r["device"] == ALL_DEVICES and r["test_acc_avg"] >= target:
            return r["sim_time"]
    return "/"


def consensus_distance(models):
    """Mean pairwise L2 distance between model vectors (rows)."""
    return float(kernels.mean_pairwise_distance(np.asarray(models, dtype=np.float64)))


def local_consensus_distance(params, cache):
    """Device-side estimate: mean distance from the local model to its cached models."""
    if not cache:
        return 0.0
    return float(np.mean([np.linalg.norm(params - c.params * c.mask) for c in cache.values()]))


def speed_factors(n, ratio, rng):
    """Uniform draws mapped affinely so the slowest/fastest ratio is exactly ``ratio``."""
    if n == 1:
        return np.ones(1)
    u = rng.random(n)
    lo, hi = u.min(), u.max()
    if hi == lo:
        return np.ones(n)
    return 1.0 + (ratio - 1.0) * (u - lo) / (hi - lo)


@dataclass
class Streams:
    data: np.random.Generator
    partition: np.random.Generator
    init: np.random.Generator
    policy: np.random.Generator
    speeds: np.random.Generator
    devices: list


def make_streams(seed, n):
    """Independent generators per purpose and per device, derived from one seed.

    Device ``i`` gets ``(train, select, diffuse, probe)`` generators.
    """
    root = np.random.SeedSequence(seed)
    top = root.spawn(6)
    dev = top[5].spawn(n)
    return Streams(
        data=np.random.default_rng(top[0]),
        partition=np.random.default_rng(top[1]),
        init=np.random.default_rng(top[2]),
        policy=np.random.default_rng(top[3]),
        speeds=np.random.default_rng(top[4]),
        devices=[tuple(np.random.default_rng(s) for s in d.spawn(4)) for d in dev],
    )


def build_task(cfg, streams):
    """Dataset, device partition, architecture and shared initial model."""
    d = cfg.data
    ds = generate_synthetic_dataset(d.n_classes, d.dims, d.n_samples, d.cluster_spread, streams.data)
    counts = lognormal_counts(len(ds.y_train), cfg.n_devices, d.count_sigma, streams.partition)
    part = dirichlet_partition(ds.y_train, cfg.n_devices, d.alpha, counts, streams.partition, d.n_classes)
    arch = Arch(cfg.model.kind, d.dims, d.n_classes, cfg.model.hidden)
    init = arch.init_params(streams.init, cfg.model.init_scale)
    return ds, part, arch, init


def centralized_baseline(cfg, epochs=20):
    """Test accuracy of SGD on the union of all training data (the A* oracle)."""
    streams = make_streams(cfg.seed, cfg.n_devices)
    ds, _, arch, init = build_task(cfg, streams)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(7)[6])
    params = init.copy()
    mask = np.ones(arch.size)
    tr = cfg.training
    for _ in range(epochs):
        params, _, _ = local_sgd(arch, params, mask, ds.x_train, ds.y_train, tr.lr, 1, tr.batch_size, rng)
    return accuracy(arch, params, None, ds.x_test, ds.y_test)


def validate(cfg):
    if cfg.n_devices < 1:
        raise ConfigError("n_devices must be >= 1")
    if cfg.max_updates < 1:
        raise ConfigError("max_updates must be >= 1")
    if cfg.simulation.speed_ratio < 1:
        raise ConfigError("speed_ratio must be >= 1")


class Simulation:
    """One asynchronous run. Use :meth:`run` once per instance."""

    def __init__(self, cfg: RunConfig, variant="custom", trace=False):
        validate(cfg)
        self.cfg = cfg
        self.variant = variant
        n = cfg.n_devices
        self.streams = make_streams(cfg.seed, n)
        self.ds, self.partition, self.arch, init = build_task(cfg, self.streams)
        self.topology = build_topology(cfg.topology, n) if n >= 2 else None
        self.speeds = speed_factors(n, cfg.simulation.speed_ratio, self.streams.speeds)
        self.coordinator = Coordinator()
        self.trace = [] if trace else None
        self.round_params = RoundParams(
            lr=cfg.training.lr,
            epochs=cfg.training.local_epochs,
            batch_size=cfg.training.batch_size,
            eta_lambda=cfg.aggregation.eta_lambda,
            dynamic_weights=cfg.aggregation.dynamic_weights,
            control_grad=cfg.aggregation.control_grad,
        )
        policy = None
        if cfg.selection.enabled and n >= 2:
            sel = cfg.selection
            policy = PriorityNetwork.random(sel.hidden, self.streams.policy)
            if sel.pretrain:
                policy = pretrain_with_heuristics(policy, self.streams.policy)
        self.devices = []
        for i in range(n):
            idx = self.coordinator.register()
            tr, se, di, pr = self.streams.devices[i]
            ix = self.partition.indices[i]
            pc = cfg.pruning
            self.devices.append(DeviceState(
                index=idx,
                params=init.copy(),
                mask=np.ones(self.arch.size),
                initial=init.copy(),
                x=self.ds.x_train[ix],
                y=self.ds.y_train[ix],
                speed=float(self.speeds[i]),
                train_rng=tr,
                select_rng=se,
                diffuse_rng=di,
                probe_rng=pr,
                weights=WeightState(self_index=idx),
                pruning=PruningState(C=pc.C, cadence=pc.cadence, p_max=pc.p_max, initial=init.copy()),
                policy=policy.copy() if policy is not None else None,
                rewards=RewardTracker(window=cfg.selection.reward_window),
            ))
        self._heap = []
        self._seq = 0
        self.now = 0.0
        self.sent = 0
        self.received = 0
        self.rows = []
        self.prune_rows = []
        self.terminated_by = None
        self.end_time = None

    # -- event queue -------------------------------------------------------

    def _push(self, time, kind, a=None, b=None):
        heapq.heappush(self._heap, (time, self._seq, kind, a, b))
        self._seq += 1

    # -- device work -------------------------------------------------------

    def _update_cost(self, dev, mask):
        flops = flops_estimate(self.arch, mask) * self.cfg.training.local_epochs * dev.samples
        return flops, self.cfg.simulation.flop_time * flops * dev.speed

    def _candidates(self, dev, snapshot):
        if self.topology is None:
            return []
        return [snapshot[j] for j in sorted(snapshot)]

    def _select(self, dev, candidates):
        if not (self.cfg.selection.enabled and candidates and dev.policy is not None):
            return candidates, None, None
        feats = dev.scaler.features(
            [c.already_aggregated for c in candidates],
            [c.staleness(dev.t) for c in candidates],
            [c.loss_value() for c in candidates],
        )
        probs = priority_forward(dev.policy, feats)
        chosen, actions = select_models(probs, dev.select_rng, self.cfg.selection.mode)
        return [candidates[k] for k in chosen], feats, actions

    def _prune(self, dev, base, selected, weights, t_next):
        cfg = self.cfg.pruning
        st = dev.pruning
        data = Batch(dev.x, dev.y)
        F_now = max(loss(self.arch, base, None, data), 1e-12)
        g = gradient(self.arch, base, None, data)
        g_norm = float(np.linalg.norm(g))
        if self.arch.size <= cfg.k_max:
            H = hessian(self.arch, base, None, data, k_max=cfg.k_max)
            eigs = np.linalg.eigvalsh(H)
            Hop = H
        else:
            def Hop(v):
                return hvp(self.arch, base, None, data, v)
            eigs = top_eigenvalues(Hop, self.arch.size, cfg.lanczos_k,
                                   v0=dev.probe_rng.standard_normal(self.arch.size))
            H = None
        st.lipschitz = lipschitz_estimate(
            lambda m, V: hvp(self.arch, m, None, data, V), base,
            cfg.lipschitz_probes, cfg.lipschitz_radius, dev.probe_rng,
        )
        st.own_rate = lossless_pruning_rate(eigs, st.lipschitz, d=self.arch.size)
        neighbor_rates = {c.sender: c.sender_rate for c in selected}
        st.rate = aggregate_pruning_rate(st.own_rate, neighbor_rates, weights, dev.index, st.p_max)
        st.lambda_g = lambda_g_schedule(g_norm, st.grad_norm_max or g_norm, st.C)
        st.grad_norm_max = max(st.grad_norm_max, g_norm)
        st.drift = float(np.linalg.norm(st.initial - base))
        if H is None:
            raise NumericError("pruning scores need a dense Hessian; raise pruning.k_max")
        mask, _, predicted = adaptive_prune(H, g, F_now, base, st.rate, st.lambda_g, eigs, cfg.damping)
        pruned = base * mask
        realized = loss(self.arch, pruned, None, data) - F_now
        self.prune_rows.append({
            "round": t_next, "device": dev.index, "own_rate": st.own_rate, "rate": st.rate,
            "lambda_g": st.lambda_g, "lipschitz": st.lipschitz, "density": float(mask.mean()),
            "predicted_dloss": predicted, "realized_dloss": realized,
        })
        return pruned, mask

    def _start_update(self, dev):
        cfg = self.cfg
        snapshot = dict(dev.cache)
        candidates = self._candidates(dev, snapshot)
        selected, feats, actions = self._select(dev, candidates)
        hp = self.round_params
        hp.lr = cfg.training.lr * (1.0 - cfg.training.lr_decay) ** dev.t
        res = aggregation_round(self.arch, dev.params, dev.mask, dev.x, dev.y, selected,
                                dev.weights, dev.t, dev.samples, hp, dev.train_rng)
        new_params, new_mask = res.params, dev.mask
        t_next = dev.t + 1
        if cfg.pruning.enabled and dev.pruning.due(t_next):
            new_params, new_mask = self._prune(dev, res.full, selected, res.weights, t_next)
        if feats is not None:
            baseline = dev.rewards.baseline(default=res.round_loss)
            dev.policy = reinforce_update(dev.policy, feats, actions, res.round_loss, baseline,
                                          cfg.selection.eta_prime, cfg.selection.grad_clip)
            dev.rewards.push(res.round_loss)
        if not np.all(np.isfinite(new_params)):
            raise NumericError(f"device {dev.index} produced non-finite parameters at update {t_next}")
        flops, duration = self._update_cost(dev, dev.mask)
        dev.pending = {
            "params": new_params, "mask": new_mask, "loss": res.round_loss,
            "used": selected, "flops": flops,
        }
        if self.trace is not None:
            self.trace.append({
                "time": self.now, "device": dev.index, "t": dev.t,
                "candidates": [c.sender for c in candidates],
                "selected": [c.sender for c in selected],
                "snapshot": snapshot,
                "weights": dict(res.weights),
                "raw": dict(dev.weights.raw),
                "staleness": {c.sender: c.staleness(dev.t) for c in selected},
                "own_loss": res.own_loss,
            })
        self._push(self.now + duration, UPDATE_DONE, dev.index)

    def _finish_update(self, dev):
        p = dev.pending
        dev.pending = None
        dev.params = p["params"]
        dev.mask = p["mask"]
        dev.last_loss = p["loss"]
        dev.flops_cum += p["flops"]
        dev.t += 1
        for c in p["used"]:
            current = dev.cache.get(c.sender)
            if current is c:
                dev.cache[c.sender] = c.mark_aggregated()
            if c.already_aggregated:
                dev.reaggregations += 1
        if self.topology is not None:
            self._diffuse(dev)
        if dev.t >= self.cfg.max_updates:
            dev.finished = True
        elif self.terminated_by is None:
            self._start_update(dev)

    def _diffuse(self, dev):
        payload = DiffusionPayload(
            sender=dev.index, sent_at=dev.t, params=dev.params.copy(), mask=dev.mask.copy(),
            loss=dev.last_loss, samples=dev.samples, rate=dev.pruning.rate,
        )
        target = sample_diffusion_target(self.topology, dev.index, dev.diffuse_rng)
        nbytes = payload.nbytes()
        bw = self.cfg.simulation.bandwidth
        delay = 0.0 if bw is None or math.isinf(bw) else nbytes / bw
        dev.bytes_sent += nbytes
        self.sent += 1
        self._push(self.now + delay, ARRIVAL, payload, target)

    def receive(self, dev, payload):
        """Replace the sender's cache entry with a fresh snapshot."""
        dev.cache[payload.sender] = CachedModel(
            sender=payload.sender,
            params=payload.params,
            mask=payload.mask,
            sender_loss=payload.loss,
            sender_samples=payload.samples,
            received_at=dev.t,
            sender_rate=payload.rate,
            sent_at=payload.sent_at,
        )
        self.received += 1

    # -- metrics -----------------------------------------------------------

    def average_model(self):
        models = np.stack([d.params for d in self.devices])
        masks = np.stack([d.mask for d in self.devices])
        w = np.full(len(self.devices), 1.0 / len(self.devices))
        return kernels.masked_average(models, masks, w, np.zeros(self.arch.size))

    def _evaluate(self):
        xt, yt = self.ds.x_test, self.ds.y_test
        avg_acc = accuracy(self.arch, self.average_model(), None, xt, yt)
        cons = consensus_distance([d.params for d in self.devices])
        accs = []
        for d in self.devices:
            acc = accuracy(self.arch, d.params, None, xt, yt)
            accs.append(acc)
            self.rows.append({
                "sim_time": self.now if self.end_time is None else self.end_time, "device": d.index, "t_i": d.t, "train_loss": d.last_loss,
                "test_acc_self": acc, "test_acc_avg": avg_acc, "density": float(d.mask.mean()),
                "consensus_global": cons, "bytes_sent_cum": d.bytes_sent, "flops_cum": d.flops_cum,
            })
        losses = [d.last_loss for d in self.devices if not math.isnan(d.last_loss)]
        self.rows.append({
            "sim_time": self.now if self.end_time is None else self.end_time, "device": ALL_DEVICES, "t_i": sum(d.t for d in self.devices),
            "train_loss": float(np.mean(losses)) if losses else float("nan"),
            "test_acc_self": float(np.mean(accs)), "test_acc_avg": avg_acc,
            "density": float(np.mean([d.mask.mean() for d in self.devices])),
            "consensus_global": cons,
            "bytes_sent_cum": sum(d.bytes_sent for d in self.devices),
            "flops_cum": sum(d.flops_cum for d in self.devices),
        })
        return cons

    def _all_finished(self):
        return all(d.finished for d in self.devices)

    # -- main loop ---------------------------------------------------------

    def run(self):
        sim = self.cfg.simulation
        for dev in self.devices:
            self._start_update(dev)
            self._push(sim.heartbeat_interval, HEARTBEAT, dev.index)
        self._push(0.0, EVAL)
        last_eval = None
        while self._heap:
            time, _, kind, a, b = heapq.heappop(self._heap)
            if time < self.now:
                raise AssertionError("event processed out of order")
            self.now = time
            if kind == ARRIVAL:
                self.receive(self.devices[b], a)
            elif self.terminated_by is not None:
                continue
            elif kind == UPDATE_DONE:
                self._finish_update(self.devices[a])
                if self._all_finished():
                    self.terminated_by = "max_updates"
            elif kind == HEARTBEAT:
                if not self.devices[a].finished:
                    self.coordinator.heartbeat(a, self.now)
                    self._push(self.now + sim.heartbeat_interval, HEARTBEAT, a)
            elif kind == EVAL:
                cons = self._evaluate()
                last_eval = self.now
                all_started = all(d.t >= 1 for d in self.devices)
                if sim.consensus_threshold > 0 and all_started and cons < sim.consensus_threshold:
                    self.terminated_by = "consensus"
                else:
                    self._push(self.now + sim.eval_interval, EVAL)
            if self.terminated_by is not None and self.end_time is None:
                self.end_time = self.now
                if last_eval != self.now:
                    self._evaluate()
                    last_eval = self.now
        return MetricsLog(self.rows, self._summary(), self.prune_rows)

    def _summary(self):
        agg = [r for r in self.rows if r["device"] == ALL_DEVICES]
        final = agg[-1]
        return {
            "schema_version": SCHEMA_VERSION,
            "variant": self.variant,
            "seed": self.cfg.seed,
            "terminated_by": self.terminated_by,
            "sim_time": self.now if self.end_time is None else self.end_time,
            "final_test_acc_avg": final["test_acc_avg"],
            "final_test_acc_self_mean": final["test_acc_self"],
            "final_consensus": final["consensus_global"],
            "final_density": final["density"],
            "total_updates": final["t_i"],
            "mflops": final["flops_cum"] / 1e6,
            "bytes": final["bytes_sent_cum"],
            "payloads_sent": self.sent,
            "payloads_received": self.received,
            "reaggregations": sum(d.reaggregations for d in self.devices),
            "liveness": {str(k): v for k, v in self.coordinator.liveness(
                self.now, self.cfg.simulation.heartbeat_timeout).items()},
            "config": to_dict(self.cfg),
        }


def run_simulation(cfg, variant="custom"):
    return Simulation(cfg, variant).run()


def sync_round(arch, global_params, device_data, lr, epochs, batch_size, rngs):
    """Every device trains from the global model; the results are averaged uniformly."""
    mask = np.ones(arch.size)
    models = [local_sgd(arch, global_params.copy(), mask, x, y, lr, epochs, batch_size, rng)[0]
              for (x, y), rng in zip(device_data, rngs)]
    return np.mean(models, axis=0), models


class SyncBaseline(Simulation):
    """Round-based synchronous averaging with a barrier after the slowest device."""

    def __init__(self, cfg, variant="sync"):
        super().__init__(cfg.variant("none"), variant)
        self.round = 0
        self.global_params = self.devices[0].params.copy()
        self.round_times = []

    def _start_round(self):
        cfg = self.cfg
        lr = cfg.training.lr * (1.0 - cfg.training.lr_decay) ** self.round
        data = [(d.x, d.y) for d in self.devices]
        rngs = [d.train_rng for d in self.devices]
        new, _ = sync_round(self.arch, self.global_params, data, lr, cfg.training.local_epochs,
                            cfg.training.batch_size, rngs)
        nbytes = payload_bytes(np.ones(self.arch.size))
        bw = cfg.simulation.bandwidth
        transfer = 0.0 if bw is None or math.isinf(bw) else 2 * nbytes / bw
        durations = []
        for d in self.devices:
            flops, compute = self._update_cost(d, d.mask)
            d.flops_cum += flops
            d.bytes_sent += 2 * nbytes
            durations.append(compute + transfer)
        self.round_times.append(max(durations))
        self._pending_global = new
        self._push(self.now + max(durations), BARRIER)

    def run(self):
        sim = self.cfg.simulation
        self._push(0.0, EVAL)
        self._start_round()
        while self._heap:
            time, _, kind, a, b = heapq.heappop(self._heap)
            self.now = time
            if kind == BARRIER:
                self.global_params = self._pending_global
                self.round += 1
                for d in self.devices:
                    d.params = self.global_params.copy()
                    d.t = self.round
                    d.last_loss = loss(self.arch, d.params, None, Batch(d.x, d.y))
                if self.round >= self.cfg.max_updates:
                    self.terminated_by = "max_updates"
                    self._evaluate()
                    break
                self._start_round()
            elif kind == EVAL:
                self._evaluate()
                self._push(self.now + sim.eval_interval, EVAL)
        summary = self._summary()
        summary["round_times"] = self.round_times
        return MetricsLog(self.rows, summary)


def run_sync_baseline(cfg):
    return SyncBaseline(cfg).run()
