"""Run and experiment configuration.

Configs are YAML mappings mirroring the dataclasses below; every key is
optional and defaults are the values used in the reference experiments
(learning rate 0.03, batch 50, 4 local epochs, Dirichlet 0.5, C = 1.5, 15x
speed disparity). Unknown keys are rejected with their key path and line.
"""

import dataclasses
import typing
from dataclasses import dataclass, field, fields
from typing import Optional

import yaml

from .errors import ConfigError

SCHEMA_VERSION = 1

VARIANTS = {
    # name: (selection, dynamic_weights, pruning)
    "full": (True, True, True),
    "none": (False, False, False),
    "rl": (True, False, False),
    "dwu": (False, True, False),
    "prune": (False, False, True),
    "rl_dwu": (True, True, False),
}


@dataclass
class ModelConfig:
    kind: str = "softmax"
    hidden: int = 8
    init_scale: float = 0.01


@dataclass
class DataConfig:
    n_classes: int = 10
    dims: int = 32
    n_samples: int = 10000
    cluster_spread: float = 2.0
    alpha: float = 0.5
    count_sigma: float = 0.1


@dataclass
class TrainingConfig:
    lr: float = 0.03
    lr_decay: float = 0.001
    batch_size: int = 50
    local_epochs: int = 4


@dataclass
class AggregationConfig:
    dynamic_weights: bool = True
    eta_lambda: float = 0.01
    control_grad: str = "exact"


@dataclass
class SelectionConfig:
    enabled: bool = True
    mode: str = "sample"
    eta_prime: float = 0.05
    hidden: int = 8
    reward_window: int = 10
    pretrain: bool = True
    grad_clip: float = 10.0


@dataclass
class PruningConfig:
    enabled: bool = True
    C: float = 1.5
    cadence: int = 5
    p_max: float = 0.8
    lipschitz_probes: int = 8
    lipschitz_radius: float = 0.1
    k_max: int = 512
    lanczos_k: int = 64
    damping: float = 10.0


@dataclass
class SimulationConfig:
    speed_ratio: float = 15.0
    flop_time: float = 1e-8
    bandwidth: Optional[float] = 1e6
    eval_interval: float = 1.0
    consensus_threshold: float = 0.0
    heartbeat_interval: float = 5.0
    heartbeat_timeout: float = 15.0


@dataclass
class RunConfig:
    seed: int = 0
    n_devices: int = 10
    topology: str = "exponential"
    max_updates: int = 40
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    aggregation: AggregationConfig = field(default_factory=AggregationConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    pruning: PruningConfig = field(default_factory=PruningConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)

    def variant(self, name):
        """Copy with the selection / dynamic-weight / pruning switches of ``name``."""
        if name not in VARIANTS:
            raise ConfigError(f"unknown variant {name!r}; expected one of {sorted(VARIANTS)}")
        sel, dwu, prune = VARIANTS[name]
        out = from_dict(to_dict(self))
        out.selection.enabled = sel
        out.aggregation.dynamic_weights = dwu
        out.pruning.enabled = prune
        return out


@dataclass
class ExperimentConfig:
    variants: list = field(default_factory=lambda: ["full"])
    seeds: list = field(default_factory=lambda: [0])
    target_accuracy: Optional[float] = None
    baseline: bool = False
    output_dir: str = "runs"


@dataclass
class ExperimentSpec:
    run: RunConfig = field(default_factory=RunConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)


_POSITIVE = {
    "n_devices", "max_updates", "hidden", "n_classes", "dims", "n_samples", "alpha", "count_sigma",
    "lr", "batch_size", "local_epochs", "reward_window", "C", "cadence", "lipschitz_probes",
    "lipschitz_radius", "k_max", "lanczos_k", "flop_time", "bandwidth", "eval_interval",
    "heartbeat_interval", "heartbeat_timeout", "grad_clip",
}
_NONNEG = {"lr_decay", "eta_lambda", "eta_prime", "consensus_threshold", "cluster_spread", "init_scale", "p_max", "damping"}
_CHOICES = {
    "kind": ("softmax", "mlp"),
    "topology": ("exponential", "ring", "star"),
    "control_grad": ("exact", "own_term"),
    "mode": ("sample", "threshold"),
}


def _line_index(text):
    """Map key paths to 1-based line numbers using the YAML node tree."""
    index = {}

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                p = path + (k.value,)
                index[p] = k.start_mark.line + 1
                walk(v, p)

    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return index
    if root is not None:
        walk(root, ())
    return index


def _check_value(name, value, hint, where):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union and type(None) in args:
        if value is None:
            return None
        hint = next(a for a in args if a is not type(None))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
    elif hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
    elif hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        value = float(value)
    elif hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
    if name in _POSITIVE and not value > 0:
        raise ConfigError(f"{where}: must be > 0, got {value!r}")
    if name in _NONNEG and not value >= 0:
        raise ConfigError(f"{where}: must be >= 0, got {value!r}")
    if name in _CHOICES and value not in _CHOICES[name]:
        raise ConfigError(f"{where}: must be one of {_CHOICES[name]}, got {value!r}")
    return value


def _build(cls, data, path, lines):
    def where(p):
        key = ".".join(p)
        line = lines.get(p)
        return f"{key} (line {line})" if line else key

    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where(path) or '<root>'}: expected a mapping")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{where(path + (str(key),))}: unknown key")
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        p = path + (f.name,)
        hint = hints[f.name]
        value = data[f.name]
        if dataclasses.is_dataclass(hint):
            kwargs[f.name] = _build(hint, value, p, lines)
        elif f.name in ("variants", "seeds"):
            if not isinstance(value, list) or not value:
                raise ConfigError(f"{where(p)}: expected a non-empty list")
            item = str if f.name == "variants" else int
            kwargs[f.name] = [_check_value(f.name, v, item, where(p)) for v in value]
        else:
            kwargs[f.name] = _check_value(f.name, value, hint, where(p))
    obj = cls(**kwargs)
    _cross_checks(obj, where, path)
    return obj


def _cross_checks(obj, where, path):
    if isinstance(obj, SimulationConfig) and obj.speed_ratio < 1:
        raise ConfigError(f"{where(path + ('speed_ratio',))}: must be >= 1")
    if isinstance(obj, PruningConfig) and not obj.p_max < 1:
        raise ConfigError(f"{where(path + ('p_max',))}: must be < 1")
    if isinstance(obj, ExperimentConfig):
        for v in obj.variants:
            if v not in VARIANTS and v != "sync":
                raise ConfigError(f"{where(path + ('variants',))}: unknown variant {v!r}")


def from_dict(data, cls=RunConfig, lines=None):
    return _build(cls, data, (), lines or {})


def to_dict(obj):
    return dataclasses.asdict(obj)


def parse_config(path):
    """Load an :class:`ExperimentSpec` from a YAML file.

    Top-level keys are those of :class:`RunConfig` plus an optional
    ``experiment`` section.
    """
    try:
        with open(path) as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)


def parse_config_text(text):
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    lines = _line_index(text)
    data = dict(data)
    exp = data.pop("experiment", None)
    run = _build(RunConfig, data, (), lines)
    experiment = _build(ExperimentConfig, exp, ("experiment",), lines)
    return ExperimentSpec(run=run, experiment=experiment)


def dump_spec(spec):
    data = to_dict(spec.run)
    data["experiment"] = to_dict(spec.experiment)
    return yaml.safe_dump(data, sort_keys=False)
