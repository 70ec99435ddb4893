"""Run configuration files.

YAML mapping with optional sections::

    road:     RoadConfig fields
    traffic:  SpawnConfig fields
    idm:      IDMParams fields
    reward:   RewardWeights fields
    sim:      dt, lane_change_duration, decision_period, max_steps, d_virtual,
              g_lead_min, g_follow_min, collision_penalty
    baseline: BaselineConfig fields
    train:    TrainConfig fields
    eval:     episodes, seed, theta_true, workers, reward_shift, write_logs,
              train_if_missing
    run:      out_dir, mode

Missing keys keep their defaults. Errors name the offending field and, when
available, its line in the file.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from lanerec.adherence import BaselineConfig
from lanerec.dqn import TrainConfig
from lanerec.mdp_env import EnvConfig, RewardWeights
from lanerec.traffic_sim import IDMParams, RoadConfig, SpawnConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = 100
    seed: int = 12345
    theta_true: float = 0.5
    workers: int = 1
    reward_shift: float = 0.0
    write_logs: bool = True
    train_if_missing: bool = True

    def __post_init__(self):
        if self.episodes <= 0:
            raise ValueError("episodes must be positive")
        if not 0.0 <= self.theta_true <= 1.0:
            raise ValueError("theta_true must be in [0, 1]")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    env: EnvConfig = EnvConfig()
    baseline: BaselineConfig = BaselineConfig()
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = EvalConfig()
    out_dir: str = "runs/default"
    mode: str = "compare"

    def __post_init__(self):
        if self.mode not in ("train", "eval", "compare"):
            raise ValueError(f"unknown mode {self.mode!r}")


SIM_KEYS = ("dt", "lane_change_duration", "decision_period", "max_steps", "d_virtual",
            "g_lead_min", "g_follow_min", "collision_penalty")
SECTIONS = ("road", "traffic", "idm", "reward", "sim", "baseline", "train", "eval", "run")


def _key_lines(text: str) -> dict:
    """Map 'section' and 'section.key' to 1-based line numbers."""
    out = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return out
    if not isinstance(root, yaml.MappingNode):
        return out
    for knode, vnode in root.value:
        sec = knode.value
        out[sec] = knode.start_mark.line + 1
        if isinstance(vnode, yaml.MappingNode):
            for k2, _ in vnode.value:
                out[f"{sec}.{k2.value}"] = k2.start_mark.line + 1
    return out


def _coerce(value, tp, where):
    origin = typing.get_origin(tp)
    if isinstance(tp, str) and tp.startswith("Optional["):
        return None if value is None else _coerce(value, tp[len("Optional["):-1], where)
    if tp is float or tp == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is int or tp == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is bool or tp == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is str or tp == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if tp is tuple or tp == "tuple" or origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    return value


def _build(cls, data, section, lines, only=None):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{_loc(section, lines)}section {section!r} must be a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    allowed = set(only) if only is not None else set(known)
    kwargs = {}
    for key, value in data.items():
        where = f"{_loc(f'{section}.{key}', lines)}{section}.{key}"
        if key not in allowed or key not in known:
            raise ConfigError(f"{where}: unknown field")
        kwargs[key] = _coerce(value, known[key].type, where)
    return kwargs


def _loc(key, lines):
    line = lines.get(key)
    return f"line {line}: " if line else ""


def _make(cls, kwargs, section, lines):
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{_loc(section, lines)}{section}: {exc}") from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    lines = _key_lines(text)
    for sec in data:
        if sec not in SECTIONS:
            raise ConfigError(f"{source}: {_loc(sec, lines)}unknown section {sec!r}")
    try:
        road = _make(RoadConfig, _build(RoadConfig, data.get("road"), "road", lines), "road", lines)
        spawn = _make(SpawnConfig, _build(SpawnConfig, data.get("traffic"), "traffic", lines),
                      "traffic", lines)
        idm = _make(IDMParams, _build(IDMParams, data.get("idm"), "idm", lines), "idm", lines)
        weights = _make(RewardWeights, _build(RewardWeights, data.get("reward"), "reward", lines),
                        "reward", lines)
        sim = _build(EnvConfig, data.get("sim"), "sim", lines, only=SIM_KEYS)
        env = _make(EnvConfig, dict(road=road, spawn=spawn, idm=idm, weights=weights, **sim),
                    "sim", lines)
        baseline = _make(BaselineConfig, _build(BaselineConfig, data.get("baseline"), "baseline", lines),
                         "baseline", lines)
        train = _make(TrainConfig, _build(TrainConfig, data.get("train"), "train", lines),
                      "train", lines)
        ev = _make(EvalConfig, _build(EvalConfig, data.get("eval"), "eval", lines), "eval", lines)
        run = _build(RunConfig, data.get("run"), "run", lines, only=("out_dir", "mode"))
        return _make(RunConfig, dict(env=env, baseline=baseline, train=train, eval=ev, **run),
                     "run", lines)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    return parse_config(p.read_text(), str(p))


def config_to_dict(cfg: RunConfig) -> dict:
    env = cfg.env
    asd = dataclasses.asdict
    return {
        "road": asd(env.road), "traffic": asd(env.spawn), "idm": asd(env.idm),
        "reward": asd(env.weights), "sim": {k: getattr(env, k) for k in SIM_KEYS},
        "baseline": asd(cfg.baseline), "train": asd(cfg.train), "eval": asd(cfg.eval),
        "run": {"out_dir": cfg.out_dir, "mode": cfg.mode},
    }


def dump_config(cfg: RunConfig) -> str:
    def plain(x):
        if isinstance(x, dict):
            return {k: plain(v) for k, v in x.items()}
        if isinstance(x, (tuple, list)):
            return [plain(v) for v in x]
        return x
    return yaml.safe_dump(plain(config_to_dict(cfg)), sort_keys=False)
