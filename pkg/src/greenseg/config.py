"""Run configuration and its ``key = value`` file format.

The file is INI-style: ``[section]`` headers followed by ``key = value``
lines; ``#`` and ``;`` start comments.  Unknown sections or keys are errors.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields

from .data.loader import LoaderConfig
from .models import ArchSpec, Family
from .optim import OptimizerKind
from .parallel import Compressor
from .tensor import Precision


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "phantoms"  # phantoms | dataset | directory | manifest
    path: str = ""
    n: int = 256
    side: int = 64
    time_policy: str = "all"
    drop_empty: bool = False
    split_seed: int = 0
    decode_ms: float = 0.0


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float | None = None
    beta2: float | None = None
    eps: float | None = None
    weight_decay: float | None = None
    amsgrad: bool = False


@dataclass
class TrainingConfig:
    loss: str = "dice"
    max_epochs: int = 200
    early_stop_patience: int = 15
    lr_plateau_factor: float = 0.1
    lr_plateau_patience: int = 5
    lr_min: float = 1e-6
    lr_find: bool = True
    lr_find_max_steps: int = 100
    swa: bool = False
    swa_start_epoch: int = 10
    augment: bool = True
    precision: str = "f32"
    seed: int = 0
    eval_batch_size: int = 64


@dataclass
class ParallelConfig:
    world_size: int = 1
    compressor: str = "none"
    bucket_cap_mb: float = 0.0
    find_unused_parameters: bool = False


@dataclass
class EnergyConfig:
    mode: str = "counters"
    cpu_watts: float = 50.0
    gpu_watts: float = 0.0
    ram_watts: float = 0.0
    interval_ms: float = 500.0


@dataclass
class OutputConfig:
    dir: str = ""
    run_name: str = ""


@dataclass
class RunConfig:
    model: ArchSpec = field(default_factory=ArchSpec)
    data: DataConfig = field(default_factory=DataConfig)
    loader: LoaderConfig = field(default_factory=LoaderConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    parallel: ParallelConfig = field(default_factory=ParallelConfig)
    energy: EnergyConfig = field(default_factory=EnergyConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def validate(self) -> "RunConfig":
        t = self.training
        if t.loss not in ("dice", "bce", "mcc"):
            raise ConfigError(f"unknown loss {t.loss!r}")
        Precision(t.precision)
        OptimizerKind(self.optimizer.kind)
        Compressor.parse(self.parallel.compressor)
        if t.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if t.early_stop_patience < 1 or t.lr_plateau_patience < 1:
            raise ConfigError("patience values must be >= 1")
        if not 0 < t.lr_plateau_factor < 1:
            raise ConfigError("lr_plateau_factor must lie in (0, 1)")
        if t.lr_find_max_steps < 1:
            raise ConfigError("lr_find_max_steps must be >= 1")
        if self.optimizer.lr <= 0 or t.lr_min <= 0:
            raise ConfigError("learning rates must be positive")
        if self.parallel.world_size < 1:
            raise ConfigError("world_size must be >= 1")
        if self.loader.batch_size % self.parallel.world_size:
            raise ConfigError("batch_size must be divisible by world_size")
        if self.data.source not in ("phantoms", "dataset", "directory", "manifest"):
            raise ConfigError(f"unknown data source {self.data.source!r}")
        if self.energy.mode not in ("counters", "modeled"):
            raise ConfigError(f"unknown energy mode {self.energy.mode!r}")
        if self.data.source == "phantoms":
            self.model.check_side(self.data.side)
        return self

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            sec = getattr(self, f.name)
            d = sec.to_dict() if isinstance(sec, ArchSpec) else dataclasses.asdict(sec)
            out[f.name] = d
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cfg = cls()
        for sec, values in d.items():
            for k, v in values.items():
                set_value(cfg, f"{sec}.{k}", v)
        return cfg


def full_protocol() -> RunConfig:
    """The full-scale protocol: 128 images per device, 16-bit, cached loader
    with six persistent workers prefetching two batches each."""
    cfg = RunConfig()
    cfg.loader = LoaderConfig(workers=6, prefetch_per_worker=2, persistent_workers=True, cache=True,
                              batch_size=128)
    cfg.training.precision = Precision.F16EMU.value
    cfg.model = ArchSpec(Family.ATTN_SQUEEZE_UNET, base_channels=60, depth=5)
    return cfg


PRESETS = {"desk": RunConfig, "full": full_protocol}


def _convert(current, text, ftype):
    if isinstance(text, str):
        s = text.strip()
    else:
        return text
    target = type(current) if current is not None else None
    tname = str(ftype)
    if target is bool or tname == "bool":
        low = s.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    if s.lower() in ("none", "") and "None" in tname:
        return None
    if target is int or tname == "int":
        return int(s)
    if target is float or "float" in tname:
        return float(s)
    return s


def set_value(cfg: RunConfig, dotted: str, value):
    """Set ``section.key`` from a string (or already-typed) value."""
    try:
        sec_name, key = dotted.split(".", 1)
    except ValueError:
        raise ConfigError(f"expected section.key, got {dotted!r}") from None
    if not hasattr(cfg, sec_name):
        raise ConfigError(f"unknown section [{sec_name}]")
    sec = getattr(cfg, sec_name)
    fmap = {f.name: f for f in fields(sec)}
    if key not in fmap:
        raise ConfigError(f"unknown key {key!r} in [{sec_name}]")
    cur = getattr(sec, key)
    if isinstance(cur, Family):
        val = Family(str(value).strip())
    else:
        try:
            val = _convert(cur, value, fmap[key].type)
        except ValueError as exc:
            raise ConfigError(f"{dotted}: {exc}") from None
    if isinstance(sec, ArchSpec):
        setattr(cfg, sec_name, dataclasses.replace(sec, **{key: val}))
    elif isinstance(sec, LoaderConfig):
        setattr(cfg, sec_name, dataclasses.replace(sec, **{key: val}))
    else:
        setattr(sec, key, val)


def load_config(path, preset: str = "desk") -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    with open(path) as fh:
        parser.read_file(fh)
    cfg = PRESETS[preset]()
    for sec in parser.sections():
        for key, value in parser.items(sec):
            set_value(cfg, f"{sec}.{key}", value)
    return cfg.validate()


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for sec, values in cfg.to_dict().items():
        lines.append(f"[{sec}]")
        for k, v in values.items():
            lines.append(f"{k} = {'' if v is None else v}")
        lines.append("")
    return "\n".join(lines)
