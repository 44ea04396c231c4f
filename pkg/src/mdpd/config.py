"""Run configuration: ``key=value`` text files with dotted section prefixes.

Example::

    # comments and blank lines are ignored
    seed=3
    arch.D_B=64
    distill.lambda=0.5
    schedule.warmup=cosine
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .distill import DistillConfig
from .models import ArchSpec

MODES = ("mdpd", "full_ft", "partial", "side_only")


class ConfigError(ValueError):
    pass


@dataclass
class OptimConfig:
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-2
    eps: float = 1e-8
    grad_clip: Optional[float] = None


@dataclass
class ScheduleConfig:
    warmup: str = "linear"
    warmup_frac: float = 0.1


@dataclass
class TaskConfig:
    classes: int = 4
    n_train: int = 512
    n_eval: int = 1000
    noise: float = 1.0
    radius: float = 3.0


@dataclass
class PretrainConfig:
    steps: int = 500
    lr: float = 1e-3
    batch_size: int = 32
    min_accuracy: float = 0.90


@dataclass
class TrainConfig:
    arch: ArchSpec = field(default_factory=ArchSpec)
    distill: DistillConfig = field(default_factory=DistillConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    steps: int = 200
    batch_size: int = 32
    seed: int = 0
    mode: str = "mdpd"
    eval_every: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.schedule.warmup not in ("linear", "cosine"):
            raise ConfigError(f"schedule.warmup must be linear or cosine, got {self.schedule.warmup!r}")
        if not 0.0 <= self.schedule.warmup_frac <= 1.0:
            raise ConfigError("schedule.warmup_frac must lie in [0, 1]")
        if self.task.classes < 2:
            raise ConfigError("task.classes must be >= 2")
        if self.task.classes != self.arch.D_out:
            raise ConfigError(f"task.classes={self.task.classes} must equal arch.D_out={self.arch.D_out}")
        if self.steps < 0 or self.batch_size <= 0:
            raise ConfigError("steps must be >= 0 and batch_size > 0")

    def dump(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in flatten(self).items())

    def hash(self) -> str:
        return hashlib.sha256(self.dump().encode()).hexdigest()[:16]


# config key -> (section attribute, field name)
_SECTIONS = {"arch": "arch", "distill": "distill", "optim": "optim", "schedule": "schedule",
             "task": "task", "pretrain": "pretrain"}
_RENAMES = {("distill", "lambda"): "lam"}
_TOP = ("steps", "batch_size", "seed", "mode", "eval_every")
_TOP_ALIASES = {"train.steps": "steps", "train.batch_size": "batch_size"}


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def flatten(cfg: TrainConfig) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for k in _TOP:
        out[k] = getattr(cfg, k)
    for sec, attr in _SECTIONS.items():
        obj = getattr(cfg, attr)
        for f in dataclasses.fields(obj):
            name = next((k for (s, k), v in _RENAMES.items() if s == sec and v == f.name), f.name)
            out[f"{sec}.{name}"] = getattr(obj, f.name)
    return out


def _coerce(raw: str, like: Any, typ: Any, key: str):
    raw = raw.strip()
    optional = "Optional" in str(typ)
    if optional and raw.lower() in ("none", ""):
        return None
    kind = type(like) if like is not None else float
    if kind is bool:
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return raw


def _apply(values: dict[str, tuple[str, Optional[int]]]) -> TrainConfig:
    base = TrainConfig()
    sections = {sec: dataclasses.asdict(getattr(base, attr)) if dataclasses.is_dataclass(getattr(base, attr)) else {}
                for sec, attr in _SECTIONS.items()}
    top = {k: getattr(base, k) for k in _TOP}
    types = {sec: {f.name: f.type for f in dataclasses.fields(getattr(base, attr))}
             for sec, attr in _SECTIONS.items()}
    top_types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}

    def where(key, line):
        return f"{key!r}" + (f" (line {line})" if line else "")

    for key, (raw, line) in values.items():
        key = _TOP_ALIASES.get(key, key)
        try:
            if "." in key:
                sec, name = key.split(".", 1)
                if sec not in _SECTIONS:
                    raise ConfigError(f"unknown key {where(key, line)}")
                fname = _RENAMES.get((sec, name), name)
                if fname not in sections[sec]:
                    raise ConfigError(f"unknown key {where(key, line)}")
                sections[sec][fname] = _coerce(raw, sections[sec][fname], types[sec][fname], key)
            else:
                if key not in top:
                    raise ConfigError(f"unknown key {where(key, line)}")
                top[key] = _coerce(raw, top[key], top_types[key], key)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"type error for {where(key, line)}: {exc}") from None
    try:
        return TrainConfig(
            arch=ArchSpec(**sections["arch"]),
            distill=DistillConfig(**sections["distill"]),
            optim=OptimConfig(**sections["optim"]),
            schedule=ScheduleConfig(**sections["schedule"]),
            task=TaskConfig(**sections["task"]),
            pretrain=PretrainConfig(**sections["pretrain"]),
            **top,
        )
    except ConfigError:
        raise
    except ValueError as exc:
        # name the offending key when the message mentions it
        lines = {k: ln for k, (_, ln) in values.items()}
        hit = next((k for k in lines if k.split(".")[-1] in str(exc)
                    or (k == "distill.lambda" and "lambda" in str(exc))), None)
        loc = f" [{where(hit, lines[hit])}]" if hit else ""
        raise ConfigError(f"invalid configuration{loc}: {exc}") from None


def parse_text(text: str, overrides: Optional[dict[str, str]] = None) -> TrainConfig:
    values: dict[str, tuple[str, Optional[int]]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if "=" not in s:
            raise ConfigError(f"line {lineno}: expected key=value, got {s!r}")
        k, v = s.split("=", 1)
        values[k.strip()] = (v.strip(), lineno)
    for k, v in (overrides or {}).items():
        values[k] = (str(v), None)
    return _apply(values)


def parse_config(file_path=None, flag_overrides: Optional[dict[str, str]] = None) -> TrainConfig:
    """Read ``file_path`` (may be None for defaults) and apply flag overrides on top."""
    text = Path(file_path).read_text() if file_path else ""
    return parse_text(text, flag_overrides)
