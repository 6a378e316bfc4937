"""Run configuration: four sections read from a dotted ``key = value`` file.

Example::

    # whole-line comments start with '#'
    env.reward_mode = gne_soft
    train.algo = sim_reinforce
    train.hidden = (16,)
    minmax.lr_outer = inv_sqrt:0.5
    eval.matches_per_pair = 20

Values are Python literals where they parse as one (numbers, tuples,
``True``/``False``) and bare strings otherwise.  Every key must name a field
of its section; unknown sections or keys are errors.  ``format_config``
writes the fully resolved configuration back in the same format, and
reading that output reproduces the run.
"""
from __future__ import annotations

import ast
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .algos import TrainConfig
from .errors import ConfigError
from .minmax import SolverConfig
from .reachavoid import ReachAvoidConfig


@dataclass
class EvalConfig:
    seed: int = 0
    # tournament
    attackers: str = ""          # "name=path;name=path"
    defenders: str = "pursuit=pursuit"
    matches_per_pair: int = 50
    seeds: int = 3
    masking: str = "auto"        # auto, on or off
    # pursuit
    attacker: str = ""
    episodes: int = 100
    # bellman
    leader: str = ""             # empty: fresh random policy from the seed
    follower: str = ""
    variant: str = "stackelberg"
    num_states: int = 32
    num_rollouts: int = 32
    next_state: str = "realized"
    states: str = "initial"
    # verify
    payoff: str = ""             # empty: the bundled matching-pennies matrix
    # figures
    render: int = 0

    def __post_init__(self):
        if self.masking not in ("auto", "on", "off"):
            raise ConfigError("eval.masking must be auto, on or off")
        if self.variant not in ("nash", "stackelberg"):
            raise ConfigError("eval.variant must be nash or stackelberg")
        if self.next_state not in ("realized", "deviation"):
            raise ConfigError("eval.next_state must be realized or deviation")
        if self.states not in ("initial", "visited"):
            raise ConfigError("eval.states must be initial or visited")
        for name in ("matches_per_pair", "seeds", "episodes", "num_states", "num_rollouts"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"eval.{name} must be >= 1")
        if self.render < 0:
            raise ConfigError("eval.render must be nonnegative")

    @property
    def mask_flag(self):
        return {"auto": "auto", "on": True, "off": False}[self.masking]


SECTIONS = {"env": ReachAvoidConfig, "train": TrainConfig, "minmax": SolverConfig, "eval": EvalConfig}


@dataclass
class RunConfig:
    env: ReachAvoidConfig = field(default_factory=ReachAvoidConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    minmax: SolverConfig = field(default_factory=SolverConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def with_seed(self, seed):
        """Copy with ``seed`` set in every section that has one."""
        out = {}
        for name in SECTIONS:
            d = asdict(getattr(self, name))
            if "seed" in d:
                d["seed"] = int(seed)
            out[name] = SECTIONS[name](**d)
        return RunConfig(**out)


def parse_value(text):
    text = text.strip()
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _coerce(section, key, value, default):
    where = f"{section}.{key}"
    try:
        if isinstance(default, bool) or (default is None and isinstance(value, bool)):
            if isinstance(value, bool):
                return value
            raise ConfigError(f"{where} must be True or False")
        if default is None:
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or float(value) != int(value):
                raise ConfigError(f"{where} must be an integer")
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool):
                raise ConfigError(f"{where} must be a number")
            return float(value)
        if isinstance(default, tuple):
            if isinstance(value, (int, float)):
                value = (value,)
            return tuple(value)
        if isinstance(default, str):
            # numbers stay numbers (a multiplier cap may be "auto" or a value)
            return value if isinstance(value, (int, float)) and not isinstance(value, bool) else str(value)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where}: {err}") from None
    return value


def build(entries: dict) -> RunConfig:
    """Construct a RunConfig from ``{"section.key": value}``."""
    grouped = {name: {} for name in SECTIONS}
    for dotted, value in entries.items():
        section, _, key = dotted.partition(".")
        if section not in SECTIONS or not key:
            raise ConfigError(f"unknown config key {dotted!r}; sections are {', '.join(SECTIONS)}")
        grouped[section][key] = value
    built = {}
    for section, cls in SECTIONS.items():
        defaults = asdict(cls())
        kw = {}
        for key, value in grouped[section].items():
            if key not in defaults:
                raise ConfigError(f"unknown config key {section}.{key}")
            kw[key] = _coerce(section, key, value, defaults[key])
        try:
            built[section] = cls(**kw)
        except TypeError as err:
            raise ConfigError(f"{section}: {err}") from None
    return RunConfig(**built)


def parse_text(text, source="<config>") -> dict:
    entries = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{n}: expected 'section.key = value'")
        key = key.strip()
        if key in entries:
            raise ConfigError(f"{source}:{n}: duplicate key {key}")
        entries[key] = parse_value(value)
    return entries


def load(path=None, overrides=None) -> RunConfig:
    """Read ``path`` (FileNotFoundError when missing) and apply ``overrides``."""
    entries = {}
    if path is not None:
        p = Path(path)
        entries = parse_text(p.read_text(), str(p))
    entries.update(overrides or {})
    return build(entries)


def _literal(v):
    if isinstance(v, str):
        # bare strings would read back as literals when they look like one
        return v if parse_value(v) == v and v.strip() == v and v else repr(v)
    if isinstance(v, (list, tuple)):
        return repr(tuple(v))
    return repr(v)


def format_config(cfg: RunConfig) -> str:
    lines = []
    for section in SECTIONS:
        d = asdict(getattr(cfg, section))
        for key in sorted(d):
            lines.append(f"{section}.{key} = {_literal(d[key])}")
    return "\n".join(lines) + "\n"
