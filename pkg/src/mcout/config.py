"""Run configuration and the flat ``key = value`` config file format.

Blank lines and ``#`` comments are ignored. Keys are the field names of
:class:`RunConfig`; unknown keys are rejected. Booleans accept
true/false/yes/no/1/0; tuple-valued keys take comma-separated lists.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields

from .errors import ConfigError
from .model import DecoderConfig, EncoderConfig, GenerationConfig, ModelConfig
from .reasoning import ReasoningConfig, Variant

# settings the source method leaves unstated; recorded in every run's metadata
DEVIATIONS = (
    "optimizer: decoupled-weight-decay Adam (no optimizer named by the method)",
    "dropout: configurable, default 0.0 (unstated)",
    "gradient clipping: global-norm clip, default 1.0 (unstated)",
    "learning rates: desk-scale defaults 3e-4 -> 3e-5 instead of 1e-5 -> 1e-6",
    "auxiliary loss: answer cross-entropy after each thought",
    "latent attention maps: std 1/sqrt(D) init; thought norm eps 1e-12",
)


@dataclass
class RunConfig:
    # model
    image_size: int = 16
    channels: int = 3
    patch_size: int = 4
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    vocab_size: int = 256
    max_positions: int = 128
    dropout: float = 0.0
    latent_heads: int = 4
    init_std: float = 0.02
    # reasoning
    variant: str = "base"
    n_thoughts: int = 5
    detach_thoughts: bool = False
    backprop_through_loop: bool = True
    use_cache: bool = True
    # loss
    mu: float = 0.3
    objective: str = "total"
    # optimization
    batch_size: int = 4
    seed: int = 0
    epochs: int = 1
    steps: int = 0
    pretrain_steps: int = 0
    warmup_steps: int = 100
    warmup_lr: float = 1e-6
    init_lr: float = 3e-4
    min_lr: float = 3e-5
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    # data
    train_data: str = ""
    pretrain_data: str = ""
    eval_data: str = ""
    # evaluation
    eval_mode: str = "open"
    temperature: float = 0.1
    max_new_tokens: int = 4
    eval_seed: int = 0
    eval_batch_size: int = 64

    def __post_init__(self):
        self.validate()

    def validate(self):
        Variant.parse(self.variant)
        self.variant = str(Variant.parse(self.variant).value)
        if self.objective not in ("total", "final"):
            raise ConfigError(f"objective must be 'total' or 'final', got {self.objective!r}")
        if self.eval_mode not in ("open", "choice"):
            raise ConfigError(f"eval_mode must be 'open' or 'choice', got {self.eval_mode!r}")
        if self.mu < 0:
            raise ConfigError("mu must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.min_lr <= self.init_lr:
            raise ConfigError("min_lr must not exceed init_lr")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        for name in ("n_thoughts", "steps", "pretrain_steps", "warmup_steps", "epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")

    # ------------------------------------------------------------ builders
    def model_config(self):
        return ModelConfig(
            EncoderConfig(self.image_size, self.channels, self.patch_size, self.d_model),
            DecoderConfig(self.n_layers, self.n_heads, self.d_model, self.vocab_size,
                          self.max_positions, self.dropout),
            self.latent_heads,
            self.init_std,
        )

    def reasoning_config(self):
        return ReasoningConfig(self.n_thoughts, self.variant, self.backprop_through_loop,
                               self.detach_thoughts, self.use_cache)

    def generation_config(self, eos_id):
        return GenerationConfig(self.temperature, self.max_new_tokens, self.eval_seed, eos_id)

    # ------------------------------------------------------------ io
    def to_dict(self):
        return dataclasses.asdict(self)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]

    def to_text(self):
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.to_dict().items())

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def from_text(cls, text, source="<config>"):
        return cls.from_dict(parse_key_values(text, cls, source))

    @classmethod
    def from_file(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read(), source=str(path))


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


_TRUE = {"true", "yes", "1", "on"}
_FALSE = {"false", "no", "0", "off"}


def coerce(raw, typ, key):
    raw = raw.strip()
    try:
        if typ in (bool, "bool"):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        if typ in (tuple, "tuple"):
            return tuple(x.strip() for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None
    return raw


def parse_key_values(text, schema_cls, source="<config>"):
    """Parse ``key = value`` lines against the fields of ``schema_cls``."""
    types = {f.name: f.type for f in fields(schema_cls)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        sep = "=" if "=" in line else ":" if ":" in line else None
        if sep is None:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split(sep, 1))
        if key not in types:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = coerce(raw, types[key], key)
    return out
