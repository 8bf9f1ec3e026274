"""Run configuration: a flat dotted-key text format with strict validation.

Config files hold one ``section.key = value`` pair per line; ``#`` starts a
comment. Unknown keys are rejected, and every value is type-checked and
range-checked with the offending key named in the error. Inline overrides
(CLI ``--set key=value``) take precedence over file values.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError

__all__ = [
    "RunConfig",
    "config_defaults",
    "parse_config",
    "smoke_overrides",
]

_SELECTION_STRATEGIES = ("combined", "cosine-only", "ot-only", "random", "learnable-init")
_COST_VARIANTS = ("dot", "mae", "mse")
_POOL_MODES = ("dual", "visual-only", "textual-only", "single-gamma")
_OUTPUT_FORMATS = ("json", "heatmaps", "trajectories")


@dataclass
class DimsConfig:
    n: int = 48          # visual tokens per toy layer
    d: int = 8           # embedding width
    d_prime: int = 12    # initial text embedding width
    nc: int = 12         # category count
    layers: int = 2      # stacked toy visual layers


@dataclass
class SelectionConfig:
    strategy: str = "combined"
    k: int = 10
    q: int = 4
    largest: bool = False


@dataclass
class TransportConfig:
    epsilon: float = 0.05
    max_iter: int = 2000
    tol: float = 1e-6
    cost_variant: str = "dot"


@dataclass
class PoolingConfig:
    mode: str = "dual"
    gamma_init: float = 0.1
    shared_proj: bool = False


@dataclass
class AttentionConfig:
    lambda_init: float = 0.5
    heads: int = 1
    pre_norm: bool = False
    wiring: str = "KV"


@dataclass
class TrainingConfig:
    steps: int = 200
    seed: int = 0
    lr_fast: float = 0.05     # projection/temperature group
    lr_slow: float = 0.0005   # agent-attention and pooling group


@dataclass
class DataConfig:
    noise: float = 0.3  # token jitter around the category direction


@dataclass
class ProbeConfig:
    seen: int = 4
    unseen: int = 2
    steps: int = 150
    lr: float = 0.5
    tokens_per_category: int = 40
    noise: float = 0.6
    mixing: float = 0.3        # unseen-direction correlation remaining with seen ones
    text_noise: float = 0.1    # jitter on the pre-aligned text encoding
    agent_steps: int = 100     # agent training before the with-agent probe
    agent_lr_slow: float = 0.02    # slow-group step size for that training
    routing_sharpness: float = 4.0  # similarity-routing scale of the probe agent
    contrast_lambda: float = 0.95   # smooth-branch subtraction weight
    inject_scale: float = 2.0       # output scale of the probe agent block


@dataclass
class OutputConfig:
    dir: str = "runs"
    formats: tuple = _OUTPUT_FORMATS


@dataclass
class RunConfig:
    dims: DimsConfig = field(default_factory=DimsConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    transport: TransportConfig = field(default_factory=TransportConfig)
    pooling: PoolingConfig = field(default_factory=PoolingConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    data: DataConfig = field(default_factory=DataConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_flat_dict(self) -> dict:
        flat = {}
        for section_field in fields(self):
            section = getattr(self, section_field.name)
            for f in fields(section):
                value = getattr(section, f.name)
                if isinstance(value, tuple):
                    value = ",".join(value)
                flat[f"{section_field.name}.{f.name}"] = value
        return flat

    def validate(self) -> "RunConfig":
        d, s, t, p, a = self.dims, self.selection, self.transport, self.pooling, self.attention
        for key, value in (
            ("dims.n", d.n), ("dims.d", d.d), ("dims.d_prime", d.d_prime),
            ("dims.nc", d.nc), ("dims.layers", d.layers),
            ("selection.k", s.k), ("selection.q", s.q),
            ("transport.max_iter", t.max_iter), ("attention.heads", a.heads),
            ("training.steps", self.training.steps),
            ("probe.seen", self.probe.seen), ("probe.unseen", self.probe.unseen),
            ("probe.steps", self.probe.steps),
            ("probe.tokens_per_category", self.probe.tokens_per_category),
            ("probe.agent_steps", self.probe.agent_steps),
        ):
            if value < 1:
                raise ConfigError(f"{key} must be >= 1, got {value}")
        if s.k > d.nc:
            raise ConfigError(f"selection.k={s.k} exceeds dims.nc={d.nc}")
        if s.q > d.n:
            raise ConfigError(f"selection.q={s.q} exceeds dims.n={d.n}")
        if s.strategy not in _SELECTION_STRATEGIES:
            raise ConfigError(
                f"selection.strategy must be one of {_SELECTION_STRATEGIES}, got {s.strategy!r}"
            )
        if t.cost_variant not in _COST_VARIANTS:
            raise ConfigError(
                f"transport.cost_variant must be one of {_COST_VARIANTS}, got {t.cost_variant!r}"
            )
        if not t.epsilon > 0:
            raise ConfigError(f"transport.epsilon must be positive, got {t.epsilon}")
        if not t.tol > 0:
            raise ConfigError(f"transport.tol must be positive, got {t.tol}")
        if p.mode not in _POOL_MODES:
            raise ConfigError(f"pooling.mode must be one of {_POOL_MODES}, got {p.mode!r}")
        if not 0.0 < p.gamma_init < 1.0:
            raise ConfigError(f"pooling.gamma_init must lie in (0, 1), got {p.gamma_init}")
        if d.d % a.heads:
            raise ConfigError(f"attention.heads={a.heads} must divide dims.d={d.d}")
        if len(a.wiring) != 2 or any(c not in "QKV" for c in a.wiring):
            raise ConfigError(
                f"attention.wiring must be a two-letter code over Q/K/V, got {a.wiring!r}"
            )
        for key, value in (
            ("training.lr_fast", self.training.lr_fast),
            ("training.lr_slow", self.training.lr_slow),
            ("data.noise", self.data.noise),
            ("probe.noise", self.probe.noise),
            ("probe.lr", self.probe.lr),
        ):
            if value < 0:
                raise ConfigError(f"{key} must be non-negative, got {value}")
        if not 0.0 <= self.probe.mixing <= 1.0:
            raise ConfigError(f"probe.mixing must lie in [0, 1], got {self.probe.mixing}")
        for key, value in (
            ("probe.routing_sharpness", self.probe.routing_sharpness),
            ("probe.inject_scale", self.probe.inject_scale),
        ):
            if not value > 0:
                raise ConfigError(f"{key} must be positive, got {value}")
        for fmt in self.output.formats:
            if fmt not in _OUTPUT_FORMATS:
                raise ConfigError(
                    f"output.formats entries must be among {_OUTPUT_FORMATS}, got {fmt!r}"
                )
        return self


def _parse_bool(key: str, raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"{key} expects a boolean, got {raw!r}")


def _parse_formats(key: str, raw: str) -> tuple:
    parts = tuple(p.strip() for p in raw.split(",") if p.strip())
    if not parts:
        raise ConfigError(f"{key} must list at least one format")
    return parts


def _coerce(key: str, raw: str, kind):
    try:
        if kind is bool:
            return _parse_bool(key, raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            return _parse_formats(key, raw)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"{key} expects {kind.__name__}, got {raw!r}") from exc


def _schema() -> dict:
    schema = {}
    cfg = RunConfig()
    for section_field in fields(cfg):
        section = getattr(cfg, section_field.name)
        for f in fields(section):
            schema[f"{section_field.name}.{f.name}"] = (
                section_field.name,
                f.name,
                type(getattr(section, f.name)),
            )
    return schema


def config_defaults() -> dict:
    """Flat {key: default} view of the full schema."""
    return RunConfig().to_flat_dict()


def _read_pairs(path) -> dict:
    pairs = {}
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        pairs[key.strip()] = raw.strip()
    return pairs


def parse_config(path=None, overrides=()) -> RunConfig:
    """Build a validated RunConfig from an optional file and inline overrides.

    Overrides are ``key=value`` strings and beat file values. Unknown keys
    raise ConfigError.
    """
    pairs = _read_pairs(path) if path is not None else {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        pairs[key.strip()] = raw.strip()

    schema = _schema()
    cfg = RunConfig()
    for key, raw in pairs.items():
        if key not in schema:
            raise ConfigError(f"unknown config key {key!r}")
        section_name, field_name, kind = schema[key]
        setattr(getattr(cfg, section_name), field_name, _coerce(key, raw, kind))
    return cfg.validate()


def smoke_overrides() -> dict:
    """The small standard instance used for fast end-to-end checks.

    selection.k drops to 3 so the channel budget fits the 6 categories.
    """
    return {
        "dims.n": "16",
        "dims.d": "8",
        "dims.nc": "6",
        "dims.layers": "2",
        "selection.k": "3",
    }
