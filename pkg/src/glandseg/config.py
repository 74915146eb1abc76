"""Flat ``section.key = value`` pipeline configuration.

Unknown keys are errors.  Lists are whitespace or comma separated.  Example::

    # shipped defaults shown
    fusion.rho = 1
    fusion.tau = 0.65
    edge.alpha = 10
    edge.beta = 0.95
    tv.lam = 0.1
    post.min_area = 500
"""
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cnn import TrainerConfig
from .fusion import FusionParams
from .preprocess import RUIFROK_HE, ClaheParams, StainMatrix
from .tvseg import EdgeParams, PdParams

__all__ = ["ConfigError", "PipelineConfig", "GridSearchSpec", "load_config", "parse_config", "dump_config"]


class ConfigError(ValueError):
    pass


@dataclass
class PathsSection:
    manifest: str = ""
    test_manifest: str = ""
    object_checkpoint: str = ""
    separator_checkpoint: str = ""
    out: str = "run"


@dataclass
class PreprocessSection:
    stains: tuple = tuple(RUIFROK_HE.values())
    clahe_tiles: tuple = (8, 8)
    clahe_clip: float = 0.01
    clahe_bins: int = 256


@dataclass
class NetSection:
    variant: str = "full"  # full | tiny


@dataclass
class SamplingSection:
    object_per_class: int = 125000
    separator_per_class: int = 125000
    heldout_object_per_class: int = 5000
    heldout_separator_per_class: int = 10000
    heldout_fraction: float = 0.2
    separator_rotations: int = 9
    separator_threshold: float = 0.5
    border: str = "valid"  # valid | mirror


@dataclass
class TvSection:
    lam: float = 0.1
    max_iters: int = 10000
    check_interval: int = 50
    gap_tolerance: float = 1e-4


@dataclass
class PostSection:
    min_area: int = 500


@dataclass
class GridSearchSpec:
    """Value lists searched exhaustively; objective is mean object Dice."""

    alpha: tuple = tuple(np.round(np.geomspace(0.5, 15, 5), 6))
    beta: tuple = tuple(np.round(np.linspace(0.35, 0.95, 4), 6))
    lam: tuple = tuple(np.round(np.geomspace(0.01, 10, 5), 6))


@dataclass
class SynthSection:
    train_benign: int = 12
    train_malignant: int = 12
    test_benign: int = 4
    test_malignant: int = 4
    train_size: int = 128
    test_size_min: int = 64
    test_size_max: int = 128


@dataclass
class PipelineConfig:
    seed: int = 0
    paths: PathsSection = field(default_factory=PathsSection)
    preprocess: PreprocessSection = field(default_factory=PreprocessSection)
    net: NetSection = field(default_factory=NetSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    train: TrainerConfig = field(default_factory=TrainerConfig)
    fusion: FusionParams = field(default_factory=FusionParams)
    edge: EdgeParams = field(default_factory=EdgeParams)
    tv: TvSection = field(default_factory=TvSection)
    post: PostSection = field(default_factory=PostSection)
    gridsearch: GridSearchSpec = field(default_factory=GridSearchSpec)
    synth: SynthSection = field(default_factory=SynthSection)

    def stain_matrix(self):
        return StainMatrix.from_values(self.preprocess.stains)

    def clahe_params(self):
        return ClaheParams(tuple(self.preprocess.clahe_tiles), self.preprocess.clahe_clip,
                           self.preprocess.clahe_bins)

    def pd_params(self):
        return PdParams(self.tv.max_iters, self.tv.check_interval, self.tv.gap_tolerance)

    def trainer(self, seed_offset):
        return dataclasses.replace(self.train, rng_seed=self.seed + seed_offset)

    def validate(self):
        """Build every parameter object once so range errors surface early."""
        try:
            self.stain_matrix()
            self.clahe_params()
            self.pd_params()
            dataclasses.replace(self.train)
            FusionParams(self.fusion.rho, self.fusion.tau, self.fusion.epsilon)
            EdgeParams(self.edge.alpha, self.edge.beta)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.net.variant not in ("full", "tiny"):
            raise ConfigError(f"net.variant must be full or tiny, got {self.net.variant!r}")
        if self.sampling.border not in ("valid", "mirror"):
            raise ConfigError(f"sampling.border must be valid or mirror, got {self.sampling.border!r}")
        if self.tv.lam <= 0 or self.post.min_area < 0:
            raise ConfigError("tv.lam must be positive and post.min_area non-negative")
        return self


def _convert(raw, default, key):
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = raw.replace(",", " ").split()
            if default and all(isinstance(d, (int, np.integer)) and not isinstance(d, bool) for d in default):
                return tuple(int(x) for x in items)
            return tuple(float(x) for x in items)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None


def _set(cfg, key, raw):
    parts = key.split(".")
    if len(parts) == 1:
        target, name = cfg, parts[0]
    elif len(parts) == 2:
        if parts[0] not in {f.name for f in dataclasses.fields(cfg)} or parts[0] == "seed":
            raise ConfigError(f"unknown config section {parts[0]!r}")
        target, name = getattr(cfg, parts[0]), parts[1]
    else:
        raise ConfigError(f"malformed key {key!r}")
    if not dataclasses.is_dataclass(target) or name not in {f.name for f in dataclasses.fields(target)}:
        raise ConfigError(f"unknown config key {key!r}")
    if dataclasses.is_dataclass(getattr(target, name)):
        raise ConfigError(f"{key!r} is a section, not a key")
    value = _convert(raw, getattr(target, name), key)
    if target is cfg:
        setattr(cfg, name, value)
    else:
        try:
            setattr(cfg, parts[0], dataclasses.replace(target, **{name: value}))
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from exc


def parse_config(text, source="<config>", cfg=None):
    """Apply ``key = value`` lines from ``text`` on top of ``cfg`` (or defaults)."""
    cfg = cfg if cfg is not None else PipelineConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            _set(cfg, key, value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return cfg


def load_config(path=None, overrides=()):
    """Defaults, then the file at ``path`` (relative paths resolve against it), then overrides."""
    cfg = PipelineConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        cfg = parse_config(path.read_text(), str(path), cfg)
        base = path.parent
        for name in ("manifest", "test_manifest", "object_checkpoint", "separator_checkpoint", "out"):
            value = getattr(cfg.paths, name)
            if value and not Path(value).is_absolute():
                setattr(cfg.paths, name, str(base / value))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = (s.strip() for s in item.split("=", 1))
        _set(cfg, key, value)
    return cfg.validate()


def _fmt(value):
    if isinstance(value, tuple):
        return " ".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def dump_config(cfg):
    """Serialize every key (resolved values) in ``parse_config`` syntax."""
    lines = [f"seed = {cfg.seed}"]
    for f in dataclasses.fields(cfg):
        section = getattr(cfg, f.name)
        if not dataclasses.is_dataclass(section):
            continue
        for sf in dataclasses.fields(section):
            if sf.init:
                lines.append(f"{f.name}.{sf.name} = {_fmt(getattr(section, sf.name))}")
    return "\n".join(lines) + "\n"
