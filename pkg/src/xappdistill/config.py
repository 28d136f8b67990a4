"""Run configuration: YAML file merged over the packaged defaults."""

from __future__ import annotations

import copy
import hashlib
import json
import zlib
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from .agents import TrainParams
from .env import EnvParams
from .mitigation import MitigationPolicy


class ConfigError(ValueError):
    pass


def default_config_text() -> str:
    return resources.files("xappdistill").joinpath("default_config.yaml").read_text()


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a section")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def _tuple(x):
    return None if x is None else tuple(tuple(v) if isinstance(v, list) else v for v in x)


def env_params_from(section: dict) -> EnvParams:
    s = section
    noise = s.get("noise_power_dbm")
    return EnvParams(
        num_bs=int(s["num_bs"]),
        num_users=int(s["num_users"]),
        area=tuple(float(v) for v in s["area_m"]),
        channel_bandwidth=float(s["channel_bandwidth_mhz"]) * 1e6,
        guard_bandwidth=float(s["guard_bandwidth_khz"]) * 1e3,
        rb_bandwidth=float(s["rb_bandwidth_khz"]) * 1e3,
        total_rbs=int(s["total_rbs"]),
        noise_density_dbm_hz=float(s["noise_density_dbm_hz"]),
        noise_power=None if noise is None else 10.0 ** ((float(noise) - 30.0) / 10.0),
        power_levels=tuple(float(v) for v in s["power_levels_dbm"]),
        default_power_dbm=float(s["default_power_dbm"]),
        rb_options=tuple(int(v) for v in s["rb_options"]),
        utility_scale=float(s["utility_scale"]),
        utility_clip=tuple(float(v) for v in s["utility_clip"]),
        carrier_freq=float(s["carrier_freq_mhz"]),
        bs_height=float(s["bs_height_m"]),
        ue_height=float(s["ue_height_m"]),
        ue_speed_range=tuple(float(v) for v in s["ue_speed_mps"]),
        step_duration=float(s["step_duration_s"]),
        episode_len=int(s["episode_len"]),
        rate_floor=float(s["rate_floor_mbps"]),
        bs_positions=_tuple(s["bs_positions_m"]),
        user_positions=_tuple(s["user_positions_m"]),
    )


def train_params_from(section: dict) -> TrainParams:
    s = dict(section)
    s["hidden"] = tuple(int(h) for h in s["hidden"])
    clip = s.get("grad_clip")
    s["grad_clip"] = None if not clip else float(clip)
    return TrainParams(**s)


@dataclass
class RunConfig:
    raw: dict
    env: EnvParams
    training: TrainParams
    mitigation: MitigationPolicy
    output_dir: Path
    master_seed: int

    @property
    def distill(self) -> dict:
        return self.raw["distill"]

    @property
    def eval(self) -> dict:
        return self.raw["eval"]

    @property
    def seeds(self) -> list[int]:
        return [int(s) for s in self.eval["seeds"]]

    @property
    def thresholds(self) -> list[float]:
        return [float(t) for t in self.eval["thresholds_mbps"]]

    @property
    def bin_edges(self) -> np.ndarray:
        h = self.eval["histogram"]
        n = int(round((float(h["stop_mbps"]) - float(h["start_mbps"])) / float(h["bin_mbps"])))
        return np.linspace(float(h["start_mbps"]), float(h["stop_mbps"]), n + 1)

    def config_hash(self) -> str:
        """SHA-256 of the canonical config, ignoring where outputs go."""
        body = {k: v for k, v in self.raw.items() if k != "output_dir"}
        body["master_seed"] = self.master_seed
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()

    def stage_rng(self, replicate: int, stage: str) -> np.random.Generator:
        return np.random.default_rng(stage_seed(self.master_seed, replicate, stage))


def stage_seed(master_seed: int, replicate: int, stage: str) -> np.random.SeedSequence:
    """Seed for one stage of one replicate: SeedSequence([master, replicate, crc32(stage)])."""
    return np.random.SeedSequence([int(master_seed), int(replicate), zlib.crc32(stage.encode())])


def build(raw: dict, seed: Optional[int] = None, out: Optional[str] = None) -> RunConfig:
    try:
        env = env_params_from(raw["env"])
        training = train_params_from(raw["training"])
        mit = raw["mitigation"]
        policy = MitigationPolicy(priority=tuple(str(p) for p in mit["priority"]),
                                  delta=float(mit["delta"]))
        d = raw["distill"]
        if float(d["temperature"]) <= 0:
            raise ValueError("distill.temperature must be > 0")
        if int(d["buffer_steps"]) < 0 or int(d["epochs"]) < 0:
            raise ValueError("distill.buffer_steps and distill.epochs must be >= 0")
        ev = raw["eval"]
        if not ev["thresholds_mbps"]:
            raise ValueError("eval.thresholds_mbps must not be empty")
        if ev["outage_unit"] not in ("user", "step"):
            raise ValueError("eval.outage_unit must be 'user' or 'step'")
        if int(ev["steps"]) < 1 or not ev["seeds"]:
            raise ValueError("eval.steps must be >= 1 and eval.seeds non-empty")
        h = ev["histogram"]
        if float(h["bin_mbps"]) <= 0 or float(h["stop_mbps"]) <= float(h["start_mbps"]):
            raise ValueError("invalid eval.histogram")
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    master = int(raw["master_seed"] if seed is None else seed)
    raw = copy.deepcopy(raw)
    raw["master_seed"] = master
    return RunConfig(raw, env, training, policy, Path(out or raw["output_dir"]), master)


def load(path=None, seed: Optional[int] = None, out: Optional[str] = None,
         overrides: Optional[dict[str, Any]] = None) -> RunConfig:
    """Load ``path`` (or the defaults alone) and validate it."""
    base = yaml.safe_load(default_config_text())
    user: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            user = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{p}: cannot parse YAML: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
    raw = _merge(base, user)
    if overrides:
        raw = _merge(raw, overrides)
    return build(raw, seed, out)
