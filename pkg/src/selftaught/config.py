"""Run configuration as flat ``section.key = value`` text.

One assignment per line, ``#`` starts a comment. Sections are ``crf``, ``train``,
``curriculum``, ``augment``, ``arch`` and ``phantom``; nested CRF kernels use a second
dot (``crf.bilateral.spatial_stddev``). Tuples are written ``a,b`` and a missing value
``none``. Keys not listed by :func:`default_items` are rejected.
"""

import dataclasses
from dataclasses import dataclass, field

from .densecrf import CrfParams
from .imagecore import AugmentParams
from .phantom import PhantomConfig
from .student import StudentArch, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class LoopSettings:
    n_per_iter: int = 10
    iterations: int = 6
    retrain_mode: str = "fine_tune"


@dataclass
class RunConfig:
    crf: CrfParams = field(default_factory=CrfParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    curriculum: LoopSettings = field(default_factory=LoopSettings)
    augment: AugmentParams = field(default_factory=AugmentParams)
    arch: StudentArch = field(default_factory=StudentArch)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)

    def curriculum_config(self):
        from .curriculum import CurriculumConfig

        return CurriculumConfig(
            n_per_iter=self.curriculum.n_per_iter, iterations=self.curriculum.iterations,
            crf=self.crf, train=self.train, retrain_mode=self.curriculum.retrain_mode,
            arch=self.arch, augment=self.augment,
        )


# the spatial kernel never has an appearance bandwidth
_FIXED = {"crf.spatial.channel_stddev"}


def _flatten(obj, prefix=""):
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            out.update(_flatten(value, key + "."))
        elif key not in _FIXED:
            out[key] = value
    return out


def default_items():
    """``{dotted_key: default_value}`` for every configurable value, in file order."""
    return _flatten(RunConfig())


def format_value(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse_scalar(text, like, key):
    text = text.strip()
    if text.lower() == "none":
        if key == "crf.bilateral.channel_stddev" or like is None:
            return None
        raise ConfigError(f"{key}: 'none' is not allowed")
    try:
        if isinstance(like, bool):
            lowered = text.lower()
            if lowered in ("true", "yes", "1"):
                return True
            if lowered in ("false", "no", "0"):
                return False
            raise ValueError(text)
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(like).__name__}") from None
    return text


def parse_value(key, text):
    defaults = default_items()
    if key not in defaults:
        raise ConfigError(f"unknown config key {key!r}")
    like = defaults[key]
    if isinstance(like, tuple):
        parts = [p for p in text.split(",")]
        if len(parts) != len(like):
            raise ConfigError(f"{key}: expected {len(like)} comma-separated values")
        return tuple(_parse_scalar(p, d, key) for p, d in zip(parts, like))
    return _parse_scalar(text, like, key)


def _build(cls, template, values, prefix):
    kwargs = {}
    for f in dataclasses.fields(cls):
        current = getattr(template, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(current):
            kwargs[f.name] = _build(type(current), current, values, key + ".")
        else:
            kwargs[f.name] = values.get(key, current)
    return cls(**kwargs)


def from_items(items):
    """Build a validated :class:`RunConfig` from ``{dotted_key: value}`` overrides."""
    unknown = sorted(set(items) - set(default_items()))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        cfg = _build(RunConfig, RunConfig(), items, "")
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.curriculum.n_per_iter < 1 or cfg.curriculum.iterations < 1:
        raise ConfigError("curriculum.n_per_iter and curriculum.iterations must be >= 1")
    from .curriculum import RETRAIN_MODES

    if cfg.curriculum.retrain_mode not in RETRAIN_MODES:
        raise ConfigError(f"curriculum.retrain_mode must be one of {RETRAIN_MODES}")
    return cfg


def parse_text(text, source="<config>"):
    items = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in items:
            raise ConfigError(f"{source}:{lineno}: {key!r} assigned twice")
        try:
            items[key] = parse_value(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return from_items(items)


def load_config(path):
    with open(path) as fh:
        return parse_text(fh.read(), source=str(path))


def serialize(cfg):
    """Every effective value, one ``key = value`` line each; parses back to ``cfg``."""
    lines = [f"{key} = {format_value(value)}" for key, value in _flatten(cfg).items()]
    return "\n".join(lines) + "\n"
