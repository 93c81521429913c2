"""Run configuration: a flat key=value file format with typed defaults.

The format keeps manifests diffable and override semantics obvious: every
known key has a default, later assignments win, command-line overrides win
over the file, and unknown keys are rejected with the list of valid ones.
"""

from dataclasses import dataclass, fields

from .data import DatasetSpec
from .errors import ConfigError
from .losses import LossWeights

DOWNSAMPLE_FACTOR = 32


@dataclass
class RunConfig:
    # training schedule
    iterations: int = 100_000
    batch_size: int = 8
    k: int = 3
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    # loss trade-offs
    lambda_cls_g: float = 1.0
    lambda_rec_g: float = 0.5
    lambda_con_g: float = 1.0
    lambda_cls_d: float = 1.0
    # ablation switches
    texture_skips: bool = True
    structure_skips: bool = True
    consistent_eq: bool = True
    # model
    image_size: int = 128
    channel_plan: tuple = (32, 64, 128, 256, 512)
    # bookkeeping
    seed: int = 0
    checkpoint_interval: int = 5000
    log_interval: int = 100
    # dataset
    data_root: str = ""
    total_categories: int = 0
    seen_count: int = 0
    unseen_count: int = 0
    images_per_category: int = 0
    unseen_split_fraction: float = 0.25

    def validate(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.k < 2:
            raise ConfigError("k must be >= 2")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        for name in ("lambda_cls_g", "lambda_rec_g", "lambda_con_g", "lambda_cls_d"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.image_size <= 0 or self.image_size % DOWNSAMPLE_FACTOR != 0:
            raise ConfigError(f"image_size must be a positive multiple of {DOWNSAMPLE_FACTOR}")
        if len(self.channel_plan) != 5 or any(c <= 0 for c in self.channel_plan):
            raise ConfigError("channel_plan must list 5 positive widths")
        if not 0 < self.unseen_split_fraction < 1:
            raise ConfigError("unseen_split_fraction must lie in (0, 1)")
        if self.checkpoint_interval < 1 or self.log_interval < 1:
            raise ConfigError("intervals must be >= 1")

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            lambda_cls_g=self.lambda_cls_g,
            lambda_rec_g=self.lambda_rec_g,
            lambda_con_g=self.lambda_con_g,
            lambda_cls_d=self.lambda_cls_d,
        )

    def dataset_spec(self) -> DatasetSpec:
        if not self.data_root:
            raise ConfigError("data_root is not set")
        return DatasetSpec(
            root_path=self.data_root,
            total_categories=self.total_categories,
            seen_count=self.seen_count,
            unseen_count=self.unseen_count,
            images_per_category=self.images_per_category,
            image_size=self.image_size,
        )


def _parse_bool(text):
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_int_list(text):
    return tuple(int(part.strip()) for part in text.split(",") if part.strip())


_PARSERS = {
    int: int,
    float: float,
    bool: _parse_bool,
    str: lambda s: s.strip(),
    tuple: _parse_int_list,
}

_FORMATTERS = {
    tuple: lambda v: ",".join(str(x) for x in v),
    bool: lambda v: "true" if v else "false",
}


def _field_types():
    return {f.name: f.type for f in fields(RunConfig)}


def _coerce(key, raw):
    types = _field_types()
    if key not in types:
        valid = ", ".join(sorted(types))
        raise ConfigError(f"unknown config key {key!r}; valid keys: {valid}")
    annotated = types[key]
    if isinstance(annotated, type):
        py_type = annotated
    else:
        py_type = {"int": int, "float": float, "bool": bool, "str": str, "tuple": tuple}[annotated]
    try:
        return _PARSERS[py_type](raw)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {exc}") from exc


def parse_config_text(text, overrides=None) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        values[key] = _coerce(key, raw)
    for key, raw in (overrides or {}).items():
        values[key] = _coerce(key, raw) if isinstance(raw, str) else raw
    config = RunConfig(**values)
    config.validate()
    return config


def parse_config(path, overrides=None) -> RunConfig:
    """Read a flat key=value config file; ``overrides`` win over the file."""
    with open(path) as fh:
        return parse_config_text(fh.read(), overrides)


def serialize_config(config: RunConfig) -> str:
    """Canonical text form; parse_config_text round-trips it exactly."""
    lines = []
    for f in fields(RunConfig):
        value = getattr(config, f.name)
        formatter = _FORMATTERS.get(type(value))
        lines.append(f"{f.name}={formatter(value) if formatter else value}")
    return "\n".join(lines) + "\n"


def config_to_dict(config: RunConfig) -> dict:
    out = {}
    for f in fields(RunConfig):
        value = getattr(config, f.name)
        out[f.name] = list(value) if isinstance(value, tuple) else value
    return out


def config_from_dict(data) -> RunConfig:
    kwargs = dict(data)
    if "channel_plan" in kwargs:
        kwargs["channel_plan"] = tuple(kwargs["channel_plan"])
    config = RunConfig(**kwargs)
    config.validate()
    return config
