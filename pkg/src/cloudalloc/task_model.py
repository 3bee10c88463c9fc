"""Task, delay and cloud records plus the JSON config format.

Units: workload in million instructions, rates in million instructions per
second, times in seconds, money in dollars.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

DELAY_MODES = ("gaussian", "folded_gaussian", "fixed")


@dataclass(frozen=True)
class TaskSpec:
    period: float
    workload: float
    deadline: float
    qos_slope: float
    penalty: float | None = None
    chance_limit: float | None = None


@dataclass(frozen=True)
class DelayModel:
    mean: float
    std: float = 0.0
    mode: str = "gaussian"


@dataclass(frozen=True)
class CloudConfig:
    total_rate: float
    step: float = 0.05
    horizon: int | None = None


@dataclass(frozen=True)
class Violation:
    field: str
    message: str

    def __str__(self):
        return f"{self.field}: {self.message}"


class ValidationError(ValueError):
    """Raised with the complete list of violated invariants."""

    def __init__(self, violations: list[Violation]):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


class ConfigError(ValueError):
    """Malformed config file (unknown keys, wrong types, bad values)."""


def task_violations(spec: TaskSpec, prefix: str = "task") -> list[Violation]:
    out = []
    if not spec.period > 0:
        out.append(Violation(f"{prefix}.period", "period must be > 0"))
    if not spec.workload > 0:
        out.append(Violation(f"{prefix}.workload", "workload must be > 0"))
    if not spec.deadline > 0:
        out.append(Violation(f"{prefix}.deadline", "deadline must be > 0"))
    if spec.deadline > spec.period:
        out.append(Violation(f"{prefix}.deadline", "deadline exceeds period"))
    if not spec.qos_slope > 0:
        out.append(Violation(f"{prefix}.qos_slope", "qos slope must be > 0"))
    if spec.penalty is not None:
        if spec.penalty < 0:
            out.append(Violation(f"{prefix}.penalty", "penalty must be >= 0"))
        elif spec.penalty < spec.qos_slope * spec.deadline:
            out.append(
                Violation(
                    f"{prefix}.penalty",
                    f"penalty below qos cost at deadline ({spec.qos_slope * spec.deadline:g})",
                )
            )
    if spec.chance_limit is not None and not 0 < spec.chance_limit < 1:
        out.append(Violation(f"{prefix}.chance_limit", "chance limit out of (0,1)"))
    return out


def delay_violations(delay: DelayModel, prefix: str = "delay") -> list[Violation]:
    out = []
    if delay.mode not in DELAY_MODES:
        out.append(Violation(f"{prefix}.mode", f"mode must be one of {DELAY_MODES}"))
    if not delay.mean >= 0:
        out.append(Violation(f"{prefix}.mean", "delay mean must be >= 0"))
    if not delay.std >= 0:
        out.append(Violation(f"{prefix}.std", "delay std must be >= 0"))
    if delay.mode == "fixed" and delay.std != 0:
        out.append(Violation(f"{prefix}.std", "fixed delay requires std = 0"))
    return out


def cloud_violations(cloud: CloudConfig, tasks=(), prefix: str = "cloud") -> list[Violation]:
    out = []
    if not cloud.total_rate > 0:
        out.append(Violation(f"{prefix}.total_rate", "total rate must be > 0"))
    if not cloud.step > 0:
        out.append(Violation(f"{prefix}.step", "step must be > 0"))
    if cloud.horizon is not None:
        if cloud.horizon < 1:
            out.append(Violation(f"{prefix}.horizon", "horizon must be a positive integer"))
        else:
            for i, t in enumerate(tasks):
                if cloud.horizon * cloud.step > t.deadline + 1e-12:
                    out.append(
                        Violation(f"{prefix}.horizon", f"horizon*step exceeds deadline of task {i + 1}")
                    )
    return out


def validate(spec: TaskSpec, delay: DelayModel, cloud: CloudConfig):
    """Return ``(spec, delay, cloud)`` unchanged or raise with every violation."""
    errors = task_violations(spec) + delay_violations(delay) + cloud_violations(cloud, [spec])
    if errors:
        raise ValidationError(errors)
    return spec, delay, cloud


@dataclass(frozen=True)
class Config:
    """Parsed config file: cloud, tasks, one delay model per task and the
    optional ``auction`` and ``train`` sections (kept as plain dicts and
    interpreted by the modules that use them)."""

    cloud: CloudConfig
    tasks: tuple[TaskSpec, ...]
    delays: tuple[DelayModel, ...]
    auction: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    shared_delay: bool = False

    def validate(self) -> Config:
        errors = cloud_violations(self.cloud, self.tasks)
        for i, (t, d) in enumerate(zip(self.tasks, self.delays)):
            errors += task_violations(t, f"tasks[{i}]")
            errors += delay_violations(d, f"delay[{i}]" if not self.shared_delay else "delay")
        if errors:
            raise ValidationError(errors)
        return self

    def to_dict(self) -> dict:
        out: dict[str, Any] = {
            "cloud": asdict(self.cloud),
            "tasks": [asdict(t) for t in self.tasks],
            "delay": asdict(self.delays[0]) if self.shared_delay else [asdict(d) for d in self.delays],
        }
        if self.auction:
            out["auction"] = self.auction
        if self.train:
            out["train"] = self.train
        return out

    def replace_task(self, index: int, task: TaskSpec) -> Config:
        tasks = list(self.tasks)
        tasks[index] = task
        return Config(self.cloud, tuple(tasks), self.delays, self.auction, self.train, self.shared_delay)


_TOP_KEYS = {"cloud", "tasks", "delay", "auction", "train"}


def _record(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    try:
        obj = cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    for f in fields(cls):
        value = getattr(obj, f.name)
        if f.name == "mode":
            if not isinstance(value, str):
                raise ConfigError(f"{where}.mode: expected a string")
        elif value is not None and (not isinstance(value, (int, float)) or isinstance(value, bool)):
            raise ConfigError(f"{where}.{f.name}: expected a number, got {value!r}")
        elif isinstance(value, float) and not math.isfinite(value):
            raise ConfigError(f"{where}.{f.name}: must be finite")
    return obj


def parse_config(data: dict) -> Config:
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    unknown = sorted(set(data) - _TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {', '.join(unknown)}")
    for key in ("cloud", "tasks", "delay"):
        if key not in data:
            raise ConfigError(f"missing top-level key '{key}'")
    cloud = _record(CloudConfig, data["cloud"], "cloud")
    if not isinstance(data["tasks"], list) or not data["tasks"]:
        raise ConfigError("tasks: expected a non-empty list")
    tasks = tuple(_record(TaskSpec, t, f"tasks[{i}]") for i, t in enumerate(data["tasks"]))
    raw_delay = data["delay"]
    if isinstance(raw_delay, list):
        if len(raw_delay) != len(tasks):
            raise ConfigError(f"delay: {len(raw_delay)} entries for {len(tasks)} tasks")
        delays = tuple(_record(DelayModel, d, f"delay[{i}]") for i, d in enumerate(raw_delay))
        shared = False
    else:
        one = _record(DelayModel, raw_delay, "delay")
        delays = (one,) * len(tasks)
        shared = True
    auction = data.get("auction", {})
    train = data.get("train", {})
    for name, sect in (("auction", auction), ("train", train)):
        if not isinstance(sect, dict):
            raise ConfigError(f"{name}: expected an object")
    return Config(cloud, tasks, delays, dict(auction), dict(train), shared)


def load_config(path: str | Path) -> Config:
    """Read, parse and validate a config file.

    JSON syntax errors are reported as ConfigError with line and column.
    """
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return parse_config(data).validate()


def dumps_config(config: Config) -> str:
    return json.dumps(config.to_dict(), indent=2) + "\n"
