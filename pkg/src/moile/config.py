"""Experiment configuration as a flat ``dotted.key = value`` text file.

Keys live under three prefixes::

    train.lambda1 = 1.0        # any TrainConfig field
    bench.setup = HH
    bench.orders = 1,2,3
    run.variants = full,disable_incremental
    run.output_dir = runs/hh

Blank lines and ``#`` comments are ignored. Unknown keys are an error.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .bench import SETUPS
from .trainer import ABLATIONS, MODES, TrainConfig

VARIANTS = ("full", *ABLATIONS, "seq_lora", "moe_lora_plain")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    setup: str = "HH"
    orders: tuple[int, ...] = (1,)
    seeds: tuple[int, ...] = (0,)
    episodes_per_task: int = 512
    eval_per_task: int = 128
    variants: tuple[str, ...] = ("full",)
    output_dir: str = "runs"

    def __post_init__(self):
        if self.setup not in SETUPS:
            raise ConfigError(f"bench.setup must be one of {SETUPS}, got {self.setup!r}")
        if any(o not in (1, 2, 3) for o in self.orders) or not self.orders:
            raise ConfigError(f"bench.orders must be drawn from 1,2,3, got {self.orders}")
        if not self.seeds:
            raise ConfigError("bench.seeds is empty")
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad or not self.variants:
            raise ConfigError(f"unknown variants {bad}; choose from {VARIANTS}")
        if self.episodes_per_task < 1 or self.eval_per_task < 1:
            raise ConfigError("episode counts must be positive")

    def train_config(self, variant: str, seed: int) -> TrainConfig:
        """TrainConfig for one (variant, seed) cell of the sweep."""
        base = replace(self.train, seed=seed, mode="full",
                       **{a: False for a in ABLATIONS})
        if variant in MODES:
            return replace(base, mode=variant)
        return replace(base, **{variant: True})

    def to_lines(self) -> list[str]:
        out = [f"train.{k} = {_fmt(v)}" for k, v in asdict(self.train).items()]
        out += [
            f"bench.setup = {self.setup}",
            f"bench.orders = {_fmt(self.orders)}",
            f"bench.seeds = {_fmt(self.seeds)}",
            f"bench.episodes_per_task = {self.episodes_per_task}",
            f"bench.eval_per_task = {self.eval_per_task}",
            f"run.variants = {_fmt(self.variants)}",
            f"run.output_dir = {self.output_dir}",
        ]
        return out

    def dumps(self) -> str:
        return "\n".join(self.to_lines()) + "\n"


_TOP = {
    "bench.setup": ("setup", str),
    "bench.orders": ("orders", "ints"),
    "bench.seeds": ("seeds", "ints"),
    "bench.episodes_per_task": ("episodes_per_task", int),
    "bench.eval_per_task": ("eval_per_task", int),
    "run.variants": ("variants", "strs"),
    "run.output_dir": ("output_dir", str),
}


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def _convert(raw: str, kind, key: str):
    try:
        if kind == "ints":
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if kind == "strs":
            return tuple(x.strip() for x in raw.split(",") if x.strip())
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    train_types = {f.name: type(getattr(TrainConfig(), f.name)) for f in fields(TrainConfig)}
    train_kw, top_kw = {}, {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        if key.startswith("train.") and key[6:] in train_types:
            train_kw[key[6:]] = _convert(raw, train_types[key[6:]], key)
        elif key in _TOP:
            name, kind = _TOP[key]
            top_kw[name] = _convert(raw, kind, key)
        else:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
    try:
        train = TrainConfig(**train_kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return ExperimentConfig(train=train, **top_kw)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))
