"""Downlink cellular simulator: B base stations serving K mobile users.

Each step applies a joint control action (handover, RB request, BS power),
moves users under random-waypoint mobility, recomputes large-scale gains,
SINR, Shannon rates and utilities, and returns the proportional-fairness
reward.

Joint actions are flat integer vectors laid out as::

    [handover(user 0..K-1), rb(user 0..K-1), power(bs 0..B-1)]

Handover index 0 means disconnect (DC); index j >= 1 selects BS j-1.
Any slot may carry ``KEEP`` (-1) to leave the current setting untouched.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

DC = -1
KEEP = -1


def dbm_to_watts(dbm):
    return 10.0 ** ((np.asarray(dbm, dtype=float) - 30.0) / 10.0)


def _default_bs_positions(num_bs: int, area: tuple[float, float]) -> tuple:
    cx, cy = area[0] / 2.0, area[1] / 2.0
    if num_bs == 1:
        return ((cx, cy),)
    radius = 0.3 * min(area)
    angles = math.pi / 2 + 2 * math.pi * np.arange(num_bs) / num_bs
    return tuple((cx + radius * math.cos(a), cy + radius * math.sin(a)) for a in angles)


@dataclass(frozen=True)
class EnvParams:
    num_bs: int = 3
    num_users: int = 5
    area: tuple[float, float] = (250.0, 250.0)
    channel_bandwidth: float = 100e6
    guard_bandwidth: float = 845e3
    rb_bandwidth: float = 360e3
    total_rbs: int = 273
    noise_density_dbm_hz: float = -174.0
    noise_power: Optional[float] = None  # watts; derived from density over the channel if None
    power_levels: tuple[float, ...] = (25.0, 27.5, 30.0, 32.5, 35.0)  # dBm
    default_power_dbm: float = 30.0
    rb_options: tuple[int, ...] = (1, 16, 45, 91, 136)
    utility_scale: float = 10.0
    utility_clip: tuple[float, float] = (-1.0, 1.0)
    carrier_freq: float = 900.0  # MHz
    bs_height: float = 50.0
    ue_height: float = 1.5
    ue_speed_range: tuple[float, float] = (1.0, 2.0)
    step_duration: float = 1.0
    episode_len: int = 100
    rate_floor: float = 1e-3  # Mbps
    bs_positions: Optional[tuple] = None
    user_positions: Optional[tuple] = None  # fixed start positions; random when None

    def __post_init__(self):
        if self.num_bs < 1 or self.num_users < 1:
            raise ValueError("num_bs and num_users must be >= 1")
        levels = self.power_levels
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValueError("power_levels must be strictly increasing")
        if levels[0] < 25.0 or levels[-1] > 35.0:
            raise ValueError("power_levels must lie within [25, 35] dBm")
        if self.default_power_dbm not in levels:
            raise ValueError("default_power_dbm must be one of power_levels")
        opts = self.rb_options
        if any(b <= a for a, b in zip(opts, opts[1:])) or opts[0] < 0:
            raise ValueError("rb_options must be strictly increasing and non-negative")
        if opts[-1] > self.total_rbs:
            raise ValueError("max(rb_options) exceeds total_rbs")
        lo, hi = self.utility_clip
        if not lo < hi:
            raise ValueError("utility_clip requires L < U")
        if self.utility_scale <= 1.0:
            raise ValueError("utility_scale must be > 1")
        if self.rate_floor <= 0:
            raise ValueError("rate_floor must be > 0")
        smin, smax = self.ue_speed_range
        if smin < 0 or smax < smin:
            raise ValueError("invalid ue_speed_range")
        if self.bs_positions is None:
            object.__setattr__(self, "bs_positions", _default_bs_positions(self.num_bs, self.area))
        object.__setattr__(self, "bs_positions", tuple(tuple(map(float, p)) for p in self.bs_positions))
        if len(self.bs_positions) != self.num_bs:
            raise ValueError("bs_positions length must equal num_bs")
        if self.user_positions is not None:
            object.__setattr__(
                self, "user_positions", tuple(tuple(map(float, p)) for p in self.user_positions)
            )
            if len(self.user_positions) != self.num_users:
                raise ValueError("user_positions length must equal num_users")
        if self.noise_power is None:
            n0 = 10.0 ** ((self.noise_density_dbm_hz - 30.0) / 10.0) * self.channel_bandwidth
            object.__setattr__(self, "noise_power", n0)
        if self.noise_power <= 0:
            raise ValueError("noise_power must be > 0")
        k, b = self.num_users, self.num_bs
        limits = np.concatenate([np.full(k, b + 1), np.full(k, len(opts)), np.full(b, len(levels))])
        object.__setattr__(self, "_action_limits", limits)
        object.__setattr__(self, "_tables", {
            "bs": np.array(self.bs_positions, dtype=float),
            "power_w": dbm_to_watts(levels),
            "rb_options": np.array(opts, dtype=np.int64),
            "not_self": 1.0 - np.eye(b),
            "users": np.arange(k),
        })

    @property
    def action_limits(self) -> np.ndarray:
        """Exclusive upper bound of each joint-action slot."""
        return self._action_limits

    @property
    def slot_names_key(self) -> tuple[int, int]:
        return (self.num_users, self.num_bs)

    @property
    def num_power_levels(self) -> int:
        return len(self.power_levels)

    @property
    def num_rb_options(self) -> int:
        return len(self.rb_options)

    @property
    def action_length(self) -> int:
        return 2 * self.num_users + self.num_bs

    @property
    def obs_width(self) -> int:
        k, b = self.num_users, self.num_bs
        return k * (b + 1) + k * b + k

    @property
    def slot_names(self) -> list[str]:
        """Names of the joint-action slots, in action-vector order."""
        k, b = self.num_users, self.num_bs
        return ([f"ho_{i}" for i in range(k)] + [f"rb_{i}" for i in range(k)]
                + [f"pw_{j}" for j in range(b)])

    @property
    def default_power_index(self) -> int:
        return self.power_levels.index(self.default_power_dbm)

    @property
    def static_rb_share(self) -> int:
        return self.total_rbs // self.num_users


# -- propagation -------------------------------------------------------------

def hata_urban(distance_km, freq_mhz: float, h_bs: float, h_ue: float):
    """Okumura-Hata urban loss in dB (small/medium city mobile correction)."""
    lf = math.log10(freq_mhz)
    a_hm = (1.1 * lf - 0.7) * h_ue - (1.56 * lf - 0.8)
    intercept = 69.55 + 26.16 * lf - 13.82 * math.log10(h_bs) - a_hm
    slope = 44.9 - 6.55 * math.log10(h_bs)
    return intercept + slope * np.log10(distance_km)


def path_loss(distance, params: EnvParams):
    """Path loss in dB for distances in metres; distances below 1 m are clamped."""
    d = np.maximum(np.asarray(distance, dtype=float), 1.0)
    loss = hata_urban(d / 1000.0, params.carrier_freq, params.bs_height, params.ue_height)
    # h <= 1 requires a non-negative loss
    return np.maximum(loss, 0.0)


def channel_gain(bs_index: int, user_position, params: EnvParams) -> float:
    bs = np.asarray(params.bs_positions[bs_index])
    d = float(np.hypot(*(np.asarray(user_position, dtype=float) - bs)))
    return float(10.0 ** (-path_loss(d, params) / 10.0))


def gain_matrix(positions: np.ndarray, params: EnvParams) -> np.ndarray:
    """K x B linear gains for all user/BS pairs."""
    bs = params._tables["bs"]
    dx = positions[:, 0:1] - bs[:, 0]
    dy = positions[:, 1:2] - bs[:, 1]
    return 10.0 ** (-path_loss(np.sqrt(dx * dx + dy * dy), params) / 10.0)


def sinr(powers_w: np.ndarray, gains: np.ndarray, noise_power: float) -> np.ndarray:
    """K x B SINR of every user towards every BS.

    Interference is the received power of all other BSs at their current
    configured power, whatever their load.
    """
    rx = gains * np.asarray(powers_w, dtype=float)[None, :]
    # sum the other cells directly; total - own cancels badly when own dominates
    interference = rx @ (1.0 - np.eye(rx.shape[1]))
    return rx / (noise_power + interference)


def data_rate(num_rbs, sinr_value, rb_bandwidth: float):
    """Shannon rate in bit/s for ``num_rbs`` resource blocks."""
    return rb_bandwidth * np.asarray(num_rbs, dtype=float) * np.log2(1.0 + np.asarray(sinr_value, dtype=float))


def utility(rate_mbps, params: EnvParams):
    lo, hi = params.utility_clip
    r = np.maximum(np.asarray(rate_mbps, dtype=float), params.rate_floor)
    return 10.0 * np.clip(np.log(r) / math.log(params.utility_scale), lo, hi)


def proportional_fairness(rates_mbps, rate_floor: float = 1e-3) -> float:
    r = np.maximum(np.asarray(rates_mbps, dtype=float), rate_floor)
    return float(np.sum(np.log(r)))


# -- controls ----------------------------------------------------------------

@dataclass
class Controls:
    """Control settings the network currently runs with."""

    serving: np.ndarray      # per user BS index, DC (-1) when disconnected
    rb_request: np.ndarray   # per user requested RB count
    rb_alloc: np.ndarray     # per user granted RB count after capacity enforcement
    power_idx: np.ndarray    # per BS index into power_levels

    def copy(self) -> "Controls":
        return Controls(self.serving.copy(), self.rb_request.copy(),
                        self.rb_alloc.copy(), self.power_idx.copy())


def enforce_capacity(serving: np.ndarray, rb_request: np.ndarray, num_bs: int,
                     total_rbs: int) -> np.ndarray:
    """Grant RB requests, scaling each over-subscribed BS to floor(req * total / sum)."""
    alloc = np.where(serving == DC, 0, rb_request).astype(np.int64)
    demand = np.bincount(serving[serving != DC], weights=alloc[serving != DC], minlength=num_bs)
    for j in np.flatnonzero(demand > total_rbs):
        mask = serving == j
        alloc[mask] = (alloc[mask] * total_rbs) // int(demand[j])
    return alloc


def check_action(action, params: EnvParams) -> np.ndarray:
    a = np.asarray(action)
    if a.ndim != 1 or a.shape[0] != params.action_length:
        raise ValueError(
            f"joint action has shape {a.shape}, expected ({params.action_length},)"
        )
    a = a.astype(np.int64)
    if (a < KEEP).any() or (a >= params.action_limits).any():
        raise ValueError(f"joint action index out of range: {a.tolist()}")
    return a


def apply_action(controls: Controls, action, params: EnvParams) -> Controls:
    """Return the control settings that result from applying ``action``."""
    a = check_action(action, params)
    k = params.num_users
    ho, rb, pw = a[:k], a[k:2 * k], a[2 * k:]
    serving = np.where(ho == KEEP, controls.serving, ho - 1)
    rb_request = np.where(rb == KEEP, controls.rb_request, params._tables["rb_options"][rb])
    power_idx = np.where(pw == KEEP, controls.power_idx, pw)
    alloc = enforce_capacity(serving, rb_request, params.num_bs, params.total_rbs)
    return Controls(serving, rb_request, alloc, power_idx)


# -- mobility ----------------------------------------------------------------

def move_users(positions, waypoints, speeds, params: EnvParams, rng: np.random.Generator):
    """Random-waypoint step: walk towards the waypoint, re-target on arrival.

    Returns new ``(positions, waypoints, speeds)``. Every waypoint lies in the
    area and users move on straight segments, so positions never leave it.
    """
    pos = np.asarray(positions, dtype=float)
    wp = np.array(waypoints, dtype=float)
    sp = np.array(speeds, dtype=float)
    step = sp * params.step_duration
    delta = wp - pos
    dist = np.sqrt(delta[:, 0] ** 2 + delta[:, 1] ** 2)
    arrived = dist <= step
    frac = np.where(arrived, 1.0, step / np.maximum(dist, 1e-12))
    pos = pos + delta * frac[:, None]
    n_new = int(np.count_nonzero(arrived))
    if n_new and params.ue_speed_range[1] > 0:
        wp[arrived] = rng.uniform((0.0, 0.0), params.area, size=(n_new, 2))
        sp[arrived] = rng.uniform(*params.ue_speed_range, size=n_new)
    return pos, wp, sp


# -- state & step ------------------------------------------------------------

@dataclass
class NetworkState:
    positions: np.ndarray
    waypoints: np.ndarray
    speeds: np.ndarray
    controls: Controls
    gains: np.ndarray
    sinr: np.ndarray
    rates: np.ndarray       # Mbps
    utilities: np.ndarray
    step_index: int = 0

    @property
    def serving(self) -> np.ndarray:
        return self.controls.serving


@dataclass
class StepMetrics:
    step: int
    serving: np.ndarray
    rates: np.ndarray
    reward: float


def compute_rates(controls: Controls, sinr_matrix: np.ndarray, params: EnvParams) -> np.ndarray:
    """Per-user rate in Mbps on the serving cell; 0 for disconnected users."""
    connected = controls.serving != DC
    s = sinr_matrix[params._tables["users"], controls.serving] * connected
    return data_rate(controls.rb_alloc, s, params.rb_bandwidth) / 1e6


def _evaluate(positions, controls: Controls, params: EnvParams):
    gains = gain_matrix(positions, params)
    powers = params._tables["power_w"][controls.power_idx]
    s = sinr(powers, gains, params.noise_power)
    rates = compute_rates(controls, s, params)
    return gains, s, rates, utility(rates, params)


def initial_state(params: EnvParams, rng: np.random.Generator) -> NetworkState:
    k = params.num_users
    if params.user_positions is not None:
        positions = np.array(params.user_positions, dtype=float)
    else:
        positions = rng.uniform((0.0, 0.0), params.area, size=(k, 2))
    waypoints = rng.uniform((0.0, 0.0), params.area, size=(k, 2))
    speeds = rng.uniform(*params.ue_speed_range, size=k)
    if params.ue_speed_range[1] == 0:
        waypoints = positions.copy()
    serving = np.argmax(gain_matrix(positions, params), axis=1).astype(np.int64)
    rb_request = np.full(k, params.static_rb_share, dtype=np.int64)
    controls = Controls(
        serving, rb_request,
        enforce_capacity(serving, rb_request, params.num_bs, params.total_rbs),
        np.full(params.num_bs, params.default_power_index, dtype=np.int64),
    )
    gains, s, rates, util = _evaluate(positions, controls, params)
    return NetworkState(positions, waypoints, speeds, controls, gains, s, rates, util, 0)


def observe(state: NetworkState, params: EnvParams) -> np.ndarray:
    """Flat observation: [one-hot serving incl. DC slot, K x B SINR, utilities]."""
    k, b = params.num_users, params.num_bs
    onehot = np.zeros((k, b + 1))
    onehot[np.arange(k), state.controls.serving + 1] = 1.0
    return np.concatenate([onehot.ravel(), state.sinr.ravel(), state.utilities])


def step(state: NetworkState, action, params: EnvParams, rng: np.random.Generator):
    """Advance one time step; returns ``(next_state, observation, reward, metrics)``."""
    controls = apply_action(state.controls, action, params)
    pos, wp, sp = move_users(state.positions, state.waypoints, state.speeds, params, rng)
    gains, s, rates, util = _evaluate(pos, controls, params)
    reward = proportional_fairness(rates, params.rate_floor)
    nxt = NetworkState(pos, wp, sp, controls, gains, s, rates, util, state.step_index + 1)
    metrics = StepMetrics(nxt.step_index, controls.serving.copy(), rates.copy(), reward)
    return nxt, observe(nxt, params), reward, metrics


class CellularEnv:
    """Stateful wrapper around :func:`step` with its own generator."""

    def __init__(self, params: EnvParams, rng: np.random.Generator):
        self.params = params
        self.rng = rng
        self.state: NetworkState = initial_state(params, rng)
        self.steps_taken = 0

    @property
    def obs_width(self) -> int:
        return self.params.obs_width

    def reset(self) -> np.ndarray:
        self.state = initial_state(self.params, self.rng)
        return observe(self.state, self.params)

    def observation(self) -> np.ndarray:
        return observe(self.state, self.params)

    def step(self, action):
        self.state, obs, reward, metrics = step(self.state, action, self.params, self.rng)
        self.steps_taken += 1
        return obs, reward, metrics

    def keep_action(self) -> np.ndarray:
        return np.full(self.params.action_length, KEEP, dtype=np.int64)

    def snapshot_controls(self) -> Controls:
        return self.state.controls.copy()

    def restore_controls(self, snapshot: Controls) -> None:
        """Restore RB requests and BS powers; serving cells stay as they are."""
        c = self.state.controls
        alloc = enforce_capacity(c.serving, snapshot.rb_request, self.params.num_bs, self.params.total_rbs)
        self.state = replace(
            self.state,
            controls=Controls(c.serving.copy(), snapshot.rb_request.copy(), alloc, snapshot.power_idx.copy()),
        )


def append_rate_log(path, metrics: Sequence[StepMetrics]) -> None:
    """Append per-user rates to a CSV with columns step,user,serving_bs,rate_mbps.

    ``serving_bs`` is 1-based; 0 marks a disconnected user.
    """
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["step", "user", "serving_bs", "rate_mbps"])
        for m in metrics:
            for i, (bs, r) in enumerate(zip(m.serving, m.rates)):
                w.writerow([m.step, i, int(bs) + 1, repr(float(r))])
