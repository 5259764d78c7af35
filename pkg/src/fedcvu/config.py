"""Experiment configuration: the method lattice, the top-level config
dataclass, and strict JSON loading (unknown keys are errors).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields

from .data import SynthConfig
from .errors import ConfigError
from .nn.network import ModelConfig
from .nn.optim import OptimConfig
from .server import SlaConfig

UNSEEN_NORM_MODES = ("mean", "global_batch_recalib")


@dataclass(frozen=True)
class MethodToggles:
    vs_norm: bool
    cv_align: bool
    sla: bool
    prox: bool


# fedbn is fedavg plus private normalization; the fedcvu_no_* ablations
# each flip exactly one toggle off the full method.
METHODS: dict[str, MethodToggles] = {
    "fedcvu": MethodToggles(vs_norm=True, cv_align=True, sla=True, prox=False),
    "fedavg": MethodToggles(vs_norm=False, cv_align=False, sla=False, prox=False),
    "fedprox": MethodToggles(vs_norm=False, cv_align=False, sla=False, prox=True),
    "fedbn": MethodToggles(vs_norm=True, cv_align=False, sla=False, prox=False),
    "fedcvu_no_vsnorm": MethodToggles(vs_norm=False, cv_align=True, sla=True, prox=False),
    "fedcvu_no_cvalign": MethodToggles(vs_norm=True, cv_align=False, sla=True, prox=False),
    "fedcvu_no_sla": MethodToggles(vs_norm=True, cv_align=True, sla=False, prox=False),
}


def method_toggles(method: str) -> MethodToggles:
    try:
        return METHODS[method]
    except KeyError:
        raise ConfigError(
            f"unknown method {method!r}; choose from {sorted(METHODS)}") from None


@dataclass(frozen=True)
class ExperimentConfig:
    method: str = "fedcvu"
    rounds: int = 150
    clients: int = 20
    local_epochs: int = 5
    batch_size: int = 32
    seeds: tuple[int, ...] = (0, 1, 2)
    eval_every: int = 1
    align_weight: float = 1.0
    tau_temp: float = 0.1
    proto_momentum: float = 0.9
    prox_mu: float = 0.01
    unseen_norm: str = "mean"
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    sla: SlaConfig = field(default_factory=SlaConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)

    def validate(self) -> None:
        method_toggles(self.method)
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.clients < 2:
            raise ConfigError("clients must be >= 2")
        if self.local_epochs < 1:
            raise ConfigError("local_epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if any(s < 0 for s in self.seeds):
            raise ConfigError("seeds must be non-negative")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if self.tau_temp <= 0.0:
            raise ConfigError("tau_temp must be positive")
        if not 0.0 <= self.proto_momentum < 1.0:
            raise ConfigError("proto_momentum must be in [0, 1)")
        if self.unseen_norm not in UNSEEN_NORM_MODES:
            raise ConfigError(f"unseen_norm must be one of {UNSEEN_NORM_MODES}")
        if method_toggles(self.method).prox and self.prox_mu <= 0.0:
            raise ConfigError("fedprox needs a positive prox_mu")
        self.synth.validate()
        self.model.validate()
        self.sla.validate()
        self.optim.validate()
        if self.synth.n_classes != self.model.n_classes:
            raise ConfigError("synth.n_classes must match model.n_classes")
        if self.synth.d_in != self.model.d_in:
            raise ConfigError("synth.d_in must match model.d_in")
        if self.clients < len(self.synth.seen_views):
            raise ConfigError("need at least one client per seen view")


_SECTIONS = {"synth": SynthConfig, "model": ModelConfig,
             "sla": SlaConfig, "optim": OptimConfig}
_TUPLE_FIELDS = {"seeds", "seen_views", "unseen_views", "mandatory"}


def _build_section(cls, raw: dict, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"section {path!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown keys in {path!r}: {sorted(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        if key in _TUPLE_FIELDS and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad value in {path!r}: {exc}") from exc


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    top_known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(raw) - top_known
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            kwargs[key] = _build_section(_SECTIONS[key], value, key)
        elif key in _TUPLE_FIELDS and isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        cfg = ExperimentConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad top-level value: {exc}") from exc
    cfg.validate()
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> dict:
    def clean(obj):
        if isinstance(obj, tuple):
            return list(obj)
        if isinstance(obj, dict):
            return {k: clean(v) for k, v in obj.items()}
        return obj

    out = dataclasses.asdict(cfg)
    return {k: clean(v) for k, v in out.items()}


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {path}: {exc}") from exc
    return config_from_dict(raw)
