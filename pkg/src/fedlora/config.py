"""Experiment configuration: a strict, validated tree of dataclasses.

Precedence is defaults < config file < ``FEDLORA_SEED`` < ``--set`` overrides.
Config files are JSON objects mirroring the tree; unknown keys are errors.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = [problems] if isinstance(problems, str) else list(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True)
class DataConfig:
    per_class: int = 400
    separation: float = 3.0
    noise_std: float = 1.0
    num_domains: int = 4
    domain_shift: float = 1.0
    label_skew: float = 0.6
    partition: str = "domain"  # domain | iid | shards
    num_shards: int = 8
    shards_per_client: int = 2
    eval_fraction: float = 0.2
    pretrain_fraction: float = 0.2


@dataclass(frozen=True)
class ModelSection:
    visual_dim: int = 8
    text_dim: int = 4
    visual_tokens: int = 2
    text_tokens: int = 2
    hidden_dim: int = 64
    num_classes: int = 8
    pretrain_epochs: int = 20
    pretrain_lr: float = 0.05
    pretrain_batch_size: int = 16


@dataclass(frozen=True)
class AdapterSection:
    rank: int = 4
    alpha: float = 8.0
    dropout: float = 0.1
    strategy: str = "plora"  # plora | full_lora | ffa_lora
    # "alpha_over_rank": scale = alpha / rank; "direct": scale = alpha
    scale_mode: str = "alpha_over_rank"
    shared_frozen_a: bool = False


@dataclass(frozen=True)
class FederationSection:
    clients: int = 4
    rounds: int = 5
    local_epochs: int = 3
    batch_size: int = 16
    lr: float = 0.05
    aggregator: str = "mean"  # mean | weighted
    prox: bool = False
    prox_mu: float = 0.01
    participation: float = 1.0
    save_adapters: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    mode: str = "federated"  # federated | centralized
    output_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSection = field(default_factory=ModelSection)
    adapter: AdapterSection = field(default_factory=AdapterSection)
    federation: FederationSection = field(default_factory=FederationSection)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @property
    def effective_alpha(self):
        """Alpha as stored on adapters, so that ``alpha / rank`` is the applied scale."""
        if self.adapter.scale_mode == "direct":
            return self.adapter.alpha * self.adapter.rank
        return self.adapter.alpha

    @property
    def prox_mu(self):
        return self.federation.prox_mu if self.federation.prox else 0.0

    @classmethod
    def from_dict(cls, d):
        return _build(cls, d, "")

    def override(self, dotted, value):
        return set_path(self, dotted, value)


SECTIONS = {"data": DataConfig, "model": ModelSection, "adapter": AdapterSection, "federation": FederationSection}


def _coerce(value, typ, path):
    if typ in (int, "int"):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return int(value)
    if typ in (float, "float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if typ in (bool, "bool"):
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if typ in (str, "str"):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported field type {typ}")


def _build(cls, d, prefix):
    if not isinstance(d, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object, got {type(d).__name__}")
    known = {f.name: f for f in fields(cls)}
    problems = [f"{prefix}{k}: unknown key" for k in d if k not in known]
    if problems:
        raise ConfigError(problems)
    kwargs = {}
    for name, value in d.items():
        path = f"{prefix}{name}"
        if cls is ExperimentConfig and name in SECTIONS:
            kwargs[name] = _build(SECTIONS[name], value, path + ".")
        else:
            kwargs[name] = _coerce(value, known[name].type, path)
    return cls(**kwargs)


def set_path(cfg, dotted, value):
    parts = dotted.split(".")
    if len(parts) == 1:
        if parts[0] in SECTIONS or parts[0] not in {f.name for f in fields(ExperimentConfig)}:
            raise ConfigError(f"{dotted}: unknown key")
        typ = {f.name: f.type for f in fields(ExperimentConfig)}[parts[0]]
        return replace(cfg, **{parts[0]: _coerce(value, typ, dotted)})
    if len(parts) != 2 or parts[0] not in SECTIONS:
        raise ConfigError(f"{dotted}: unknown key")
    section = getattr(cfg, parts[0])
    known = {f.name: f.type for f in fields(section)}
    if parts[1] not in known:
        raise ConfigError(f"{dotted}: unknown key")
    return replace(cfg, **{parts[0]: replace(section, **{parts[1]: _coerce(value, known[parts[1]], dotted)})})


def parse_override(text):
    """``"federation.rounds=10"`` -> ``("federation.rounds", 10)``; bare words stay strings."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def validate(cfg):
    """Collect every range problem, each naming its field path."""
    p = []
    d, m, a, f = cfg.data, cfg.model, cfg.adapter, cfg.federation
    if not 0 <= cfg.seed < 2**64:
        p.append("seed: must be in [0, 2^64)")
    if cfg.mode not in ("federated", "centralized"):
        p.append(f"mode: must be 'federated' or 'centralized', got {cfg.mode!r}")
    if d.per_class < 1:
        p.append("data.per_class: must be >= 1")
    if d.separation <= 0:
        p.append("data.separation: must be > 0")
    if d.noise_std < 0:
        p.append("data.noise_std: must be >= 0")
    if d.num_domains < 1:
        p.append("data.num_domains: must be >= 1")
    if d.domain_shift < 0:
        p.append("data.domain_shift: must be >= 0")
    if not 0.0 <= d.label_skew <= 1.0:
        p.append("data.label_skew: must be in [0, 1]")
    if d.partition not in ("domain", "iid", "shards"):
        p.append(f"data.partition: must be domain, iid or shards, got {d.partition!r}")
    if not 0.0 < d.eval_fraction < 1.0:
        p.append("data.eval_fraction: must be in (0, 1)")
    if not 0.0 < d.pretrain_fraction < 1.0:
        p.append("data.pretrain_fraction: must be in (0, 1)")
    if d.partition == "domain" and d.num_domains < f.clients:
        p.append(f"data.num_domains: domain partition needs >= federation.clients ({f.clients}) domains")
    if d.partition == "shards" and d.num_shards != f.clients * d.shards_per_client:
        p.append("data.num_shards: must equal federation.clients * data.shards_per_client")
    for name in ("visual_dim", "text_dim", "visual_tokens", "text_tokens", "hidden_dim", "pretrain_batch_size"):
        if getattr(m, name) < 1:
            p.append(f"model.{name}: must be >= 1")
    if m.num_classes < 2:
        p.append("model.num_classes: must be >= 2")
    if m.pretrain_epochs < 0:
        p.append("model.pretrain_epochs: must be >= 0")
    if m.pretrain_lr <= 0:
        p.append("model.pretrain_lr: must be > 0")
    if a.rank < 1 or a.rank >= min(m.num_classes, m.hidden_dim):
        p.append(
            f"adapter.rank: must satisfy 1 <= rank < min(model.num_classes, model.hidden_dim) = "
            f"{min(m.num_classes, m.hidden_dim)}, got {a.rank}"
        )
    if a.alpha <= 0:
        p.append("adapter.alpha: must be > 0")
    if not 0.0 <= a.dropout < 1.0:
        p.append("adapter.dropout: must be in [0, 1)")
    if a.strategy.lower() not in ("plora", "full_lora", "ffa_lora"):
        p.append(f"adapter.strategy: must be plora, full_lora or ffa_lora, got {a.strategy!r}")
    if a.scale_mode not in ("alpha_over_rank", "direct"):
        p.append("adapter.scale_mode: must be alpha_over_rank or direct")
    if f.clients < 1:
        p.append("federation.clients: must be >= 1")
    if f.rounds < 0:
        p.append("federation.rounds: must be >= 0")
    if f.local_epochs < 1:
        p.append("federation.local_epochs: must be >= 1")
    if f.batch_size < 1:
        p.append("federation.batch_size: must be >= 1")
    if f.lr <= 0:
        p.append("federation.lr: must be > 0")
    if f.aggregator not in ("mean", "weighted"):
        p.append(f"federation.aggregator: must be mean or weighted, got {f.aggregator!r}")
    if f.prox_mu < 0:
        p.append("federation.prox_mu: must be >= 0")
    if not 0.0 < f.participation <= 1.0:
        p.append("federation.participation: must be in (0, 1]")
    if p:
        raise ConfigError(p)
    return cfg


def parse_config(path=None, overrides=(), env=None):
    """Resolve a config from an optional JSON file, the environment and overrides."""
    env = os.environ if env is None else env
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    cfg = ExperimentConfig.from_dict(raw)
    if env.get("FEDLORA_SEED"):
        try:
            cfg = replace(cfg, seed=int(env["FEDLORA_SEED"]))
        except ValueError:
            raise ConfigError(f"seed: FEDLORA_SEED={env['FEDLORA_SEED']!r} is not an integer") from None
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        cfg = set_path(cfg, key, value)
    return validate(cfg)
