"""Run configuration: one INI file with flat sections.

Dialect: standard ``configparser`` INI, ``key = value``, ``#`` comments, no
interpolation. Sections and their keys mirror the dataclasses below; values
are parsed according to the type of the field's default. Unknown sections or
keys are errors, missing keys take the defaults. ``RunConfig.dumps`` writes
every key, so a run directory's ``config.ini`` fully determines the run.

Sections: ``task``, ``sampler``, ``sft``, ``grpo``, ``rewards.hard``,
``rewards.nuanced``, ``rewards.repetition``, ``eval``, ``io``.
"""

from __future__ import annotations

import configparser
import dataclasses
import io as _io
from dataclasses import dataclass, field
from pathlib import Path

from .grpo import GrpoConfig
from .rewards import HardRewardConfig, NuancedRewardConfig
from .sft import SftConfig


class ConfigError(ValueError):
    pass


@dataclass
class TaskSection:
    """Synthetic pool generation (``make-pool``) and held-out evaluation set."""

    pool_size: int = 50000
    d: int = 16
    seed: int = 0
    heldout_size: int = 500
    heldout_seed: int = 99


@dataclass
class SamplerSection:
    sft_n: int = 2000
    rl_n: int = 1000
    min_fraction: float = 0.05
    overrepresentation_penalty: float = 2.0
    seed: int = 0


@dataclass
class RepetitionSection:
    repeat_bonus: float = 0.1


@dataclass
class EvalSection:
    labels: str = "full14"
    dialect: str = "think_solution"

    def __post_init__(self):
        if self.labels not in ("full14", "nih9"):
            raise ConfigError("eval.labels must be full14 or nih9")


@dataclass
class IoSection:
    pool: str = "pool.jsonl"
    data_dir: str = "data"
    run_dir: str = "runs/latest"
    sft_checkpoint: str = ""
    checkpoint_every: int = 50


SECTIONS = {
    "task": ("task", TaskSection),
    "sampler": ("sampler", SamplerSection),
    "sft": ("sft", SftConfig),
    "grpo": ("grpo", GrpoConfig),
    "rewards.hard": ("hard", HardRewardConfig),
    "rewards.nuanced": ("nuanced", NuancedRewardConfig),
    "rewards.repetition": ("repetition", RepetitionSection),
    "eval": ("eval", EvalSection),
    "io": ("io", IoSection),
}


@dataclass
class RunConfig:
    task: TaskSection = field(default_factory=TaskSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    sft: SftConfig = field(default_factory=SftConfig)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    hard: HardRewardConfig = field(default_factory=HardRewardConfig)
    nuanced: NuancedRewardConfig = field(default_factory=NuancedRewardConfig)
    repetition: RepetitionSection = field(default_factory=RepetitionSection)
    eval: EvalSection = field(default_factory=EvalSection)
    io: IoSection = field(default_factory=IoSection)

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as e:
            raise ConfigError(str(e)) from e
        kwargs = {}
        for section in cp.sections():
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]")
            attr, klass = SECTIONS[section]
            kwargs[attr] = _build(section, klass, dict(cp[section]))
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.loads(Path(path).read_text())

    def dumps(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for section, (attr, _) in SECTIONS.items():
            obj = getattr(self, attr)
            cp[section] = {f.name: _fmt(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        buf = _io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    def override(self, assignments: list[str]) -> "RunConfig":
        """Apply ``section.key=value`` overrides (``rewards.hard.min_length_tokens=20``)."""
        text = self.dumps()
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        cp.read_string(text)
        for item in assignments:
            lhs, sep, value = item.partition("=")
            section, dot, key = lhs.strip().rpartition(".")
            if not sep or not dot or section not in SECTIONS:
                raise ConfigError(f"bad override {item!r}; expected section.key=value")
            if key not in cp[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            cp[section][key] = value.strip()
        buf = _io.StringIO()
        cp.write(buf)
        return RunConfig.loads(buf.getvalue())


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _parse(section: str, name: str, default, raw: str):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"[{section}] {name}: cannot parse {raw!r} as {type(default).__name__}") from None


def _build(section: str, klass, values: dict[str, str]):
    fields = {f.name: f for f in dataclasses.fields(klass)}
    unknown = sorted(set(values) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    defaults = klass()
    kwargs = {k: _parse(section, k, getattr(defaults, k), v) for k, v in values.items()}
    try:
        return klass(**kwargs)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"[{section}] {e}") from e
