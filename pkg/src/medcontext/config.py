"""Run configuration: ``section.key = value`` files plus command-line overrides.

Precedence, lowest first: built-in defaults, the config file, ``--set``
overrides, then dedicated command-line flags. ``run.seed`` is the root seed;
section seeds that are not set explicitly inherit it.

Example::

    # comments start with '#'
    run.seed = 7
    data.extents = 32, 32, 32
    train.steps = 400
    loss.beta = 0.5
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable

from . import __version__
from .data import PhantomConfig
from .errors import ConfigError
from .losses import LossConfig
from .network import NetConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class DataConfig:
    phantom: PhantomConfig = PhantomConfig()
    n_train: int = 25
    n_test: int = 5
    shots: int = 0  # 0 = use every training sample


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: DataConfig = DataConfig()
    net: NetConfig = NetConfig()
    loss: LossConfig = LossConfig()
    train: TrainConfig = TrainConfig()
    hd_percentile: float = 95.0
    explicit: frozenset = field(default_factory=frozenset, compare=False)

    def items(self) -> list[tuple[str, Any]]:
        """Flat ``(dotted key, value)`` pairs in a stable order."""
        out: list[tuple[str, Any]] = [("run.seed", self.seed)]
        out += [(f"data.{f.name}", getattr(self.data.phantom, f.name)) for f in fields(PhantomConfig)]
        out += [(f"data.{k}", getattr(self.data, k)) for k in ("n_train", "n_test", "shots")]
        for section in ("net", "loss", "train"):
            obj = getattr(self, section)
            out += [(f"{section}.{f.name}", getattr(obj, f.name)) for f in fields(obj)]
        out.append(("metric.hd_percentile", self.hd_percentile))
        return out

    def dumps(self) -> str:
        lines = [f"# medcontext {__version__} resolved configuration"]
        lines += [f"{k} = {format_value(v)}" for k, v in self.items()]
        return "\n".join(lines) + "\n"


def format_value(v: Any) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(raw: str, default: Any, key: str) -> Any:
    text = raw.strip()
    try:
        if text.lower() == "none":
            return None
        if isinstance(default, bool):
            if text.lower() in ("true", "yes", "1", "on"):
                return True
            if text.lower() in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple) or default is None:
            parts = [p.strip() for p in text.split(",") if p.strip()]
            kind = type(default[0]) if default else float
            return tuple(kind(p) for p in parts)
        return text
    except ValueError:
        raise ConfigError(f"cannot parse {key} = {raw!r}") from None


def parse_lines(lines: Iterable[str], source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if "." not in key:
            raise ConfigError(f"{source}:{n}: key {key!r} lacks a section")
        out[key] = value
    return out


def resolve(file: str | Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    raw: dict[str, str] = {}
    if file is not None:
        path = Path(file)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        raw.update(parse_lines(path.read_text().splitlines(), str(path)))
    raw.update(overrides or {})
    return build_config(raw)


def build_config(raw: dict[str, str]) -> RunConfig:
    base = RunConfig()
    defaults = dict(base.items())
    values: dict[str, Any] = {}
    for key, text in raw.items():
        if key not in defaults:
            raise ConfigError(f"unknown configuration key {key!r}")
        default = defaults[key]
        if key == "loss.class_weights":
            default = (1.0,)
        values[key] = _coerce(text, default, key)

    seed = values.get("run.seed", base.seed)

    def section(prefix: str, cls, names):
        kw = {n: values[f"{prefix}.{n}"] for n in names if f"{prefix}.{n}" in values}
        if "seed" in names and f"{prefix}.seed" not in values:
            kw["seed"] = seed
        try:
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {prefix} configuration: {exc}") from None

    phantom = section("data", PhantomConfig, [f.name for f in fields(PhantomConfig)])
    data = DataConfig(
        phantom,
        values.get("data.n_train", base.data.n_train),
        values.get("data.n_test", base.data.n_test),
        values.get("data.shots", base.data.shots),
    )
    net = section("net", NetConfig, [f.name for f in fields(NetConfig)])
    if net.num_classes != phantom.num_classes and "net.num_classes" not in values:
        net = replace(net, num_classes=phantom.num_classes)
    loss = section("loss", LossConfig, [f.name for f in fields(LossConfig)])
    train = section("train", TrainConfig, [f.name for f in fields(TrainConfig)])
    return RunConfig(
        seed=seed,
        data=data,
        net=net,
        loss=loss,
        train=train,
        hd_percentile=values.get("metric.hd_percentile", base.hd_percentile),
        explicit=frozenset(values),
    )


def with_overrides(cfg: RunConfig, overrides: dict[str, str]) -> RunConfig:
    """Re-resolve ``cfg`` with extra ``dotted.key -> text`` overrides applied on top."""
    raw = {k: format_value(v) for k, v in cfg.items() if k in cfg.explicit}
    raw.update(overrides)
    return build_config(raw)
