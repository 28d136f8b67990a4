"""Teacher deployment, KL distillation into one student, and scheme evaluation.

Stage 2 runs each teacher alone (greedy) in the deployment environment and
stores its raw observation, full per-head Q-vectors and chosen indices in a
buffer laid out over the student's heads; heads a teacher does not own are
NaN. Stage 3 fits the student to the softened teacher distributions on the
matching heads only. Stage 4 replays xApps through the arbiter and records
per-user rates.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np

from . import nn
from .agents import (ReplayBuffer, Transition, XApp, XAppSpec, _gather, features, full_layout,
                     proposal, to_joint_action)
from .env import CellularEnv, EnvParams
from .fileio import atomic_path
from .metrics import DEFAULT_BIN_EDGES, DEFAULT_THRESHOLDS, EvalMetrics
from .mitigation import Arbiter, MitigationPolicy


class Teacher(Protocol):
    name: str
    layout: nn.HeadLayout

    def q_values(self, obs) -> np.ndarray: ...

    def act(self, obs) -> np.ndarray: ...


class HeuristicTeacher:
    """Rule-based teacher exposing one-hot pseudo-Q vectors.

    The pseudo-Q is 1 at the chosen index and 0 elsewhere, so the softened
    target at temperature tau puts e^(1/tau) relative weight on the choice.
    Handover picks the strongest-SINR cell; RB and power heads pick the
    largest option.
    """

    def __init__(self, spec: XAppSpec, params: EnvParams):
        self.spec = spec
        self.name = spec.name
        self.params = params
        self.layout = spec.layout(params)

    def act(self, obs) -> np.ndarray:
        p = self.params
        k, b = p.num_users, p.num_bs
        sinr = np.asarray(obs)[k * (b + 1):k * (b + 1) + k * b].reshape(k, b)
        out = []
        for h in self.layout:
            if h.role == "handover":
                out.append(int(np.argmax(sinr[h.index])) + 1)
            else:
                out.append(h.width - 1)
        return np.array(out, dtype=np.int64)

    def q_values(self, obs) -> np.ndarray:
        q = np.zeros(self.layout.total)
        q[self.layout.offsets + self.act(obs)] = 1.0
        return q


# -- stage 2 -----------------------------------------------------------------

def collect_experience(teachers: Sequence[Teacher], env: CellularEnv, steps: int) -> ReplayBuffer:
    """Deploy each teacher alone for its share of ``steps`` and record what it saw and proposed.

    Records are captured before the action reaches the network. The buffer
    layout is the union of all heads; episodes restart every
    ``episode_len`` steps.
    """
    params = env.params
    layout = full_layout(params)
    buf = ReplayBuffer(max(int(steps), 1), params.obs_width, layout, store_q=True)
    if not teachers:
        raise ValueError("need at least one teacher")
    for t in teachers:
        if not layout.is_superset_of(t.layout):
            raise ValueError(f"teacher {t.name} has heads outside the environment layout")
        net = getattr(t, "net", None)
        if net is not None and net.input_width != params.obs_width:
            raise ValueError(
                f"teacher {t.name} expects {net.input_width} inputs, environment gives {params.obs_width}"
            )
    shares = [steps // len(teachers) + (1 if i < steps % len(teachers) else 0)
              for i in range(len(teachers))]
    for teacher, share in zip(teachers, shares):
        cols = np.concatenate([np.arange(layout.slice(h.name).start, layout.slice(h.name).stop)
                               for h in teacher.layout])
        head_pos = np.array([layout.position(h.name) for h in teacher.layout])
        obs = env.reset()
        for t in range(share):
            if t and t % params.episode_len == 0:
                obs = env.reset()
            q = teacher.q_values(obs)
            idx = teacher.act(obs)
            full_q = np.full(layout.total, np.nan)
            full_q[cols] = q
            full_idx = np.full(len(layout), -1, dtype=np.int64)
            full_idx[head_pos] = idx
            next_obs, reward, _ = env.step(to_joint_action(teacher.layout, idx, params))
            buf.push(Transition(obs, full_idx, reward, next_obs, False, full_q, teacher.name))
            obs = next_obs
    return buf


# -- stage 3 -----------------------------------------------------------------

@dataclass
class DistillResult:
    student: nn.QNet
    loss_curve: list[float]
    train_idx: np.ndarray
    holdout_idx: np.ndarray
    agreement: dict = field(default_factory=dict)


def _student_columns(buf: ReplayBuffer, student: nn.QNet) -> np.ndarray:
    """Student output columns reordered into the buffer layout."""
    tq = buf.teacher_q[: len(buf)]
    present = ~np.isnan(tq[:, buf.layout.offsets]).all(axis=0) if len(buf) else np.zeros(len(buf.layout), bool)
    cols = np.zeros(buf.layout.total, dtype=np.int64)
    for h, used in zip(buf.layout, present):
        if h.name in student.layout and student.layout.head(h.name).width == h.width:
            sl = student.layout.slice(h.name)
            cols[buf.layout.slice(h.name)] = np.arange(sl.start, sl.stop)
        elif used:
            raise ValueError(f"teacher head {h.name} has no matching student head")
    return cols


def kl_batch(teacher_q: np.ndarray, student_out: np.ndarray, layout: nn.HeadLayout, tau: float):
    """Mean over rows of the per-head KL summed over heads present in ``teacher_q``.

    ``teacher_q`` and ``student_out`` share ``layout``; NaN teacher heads are
    skipped. Returns ``(loss, grad w.r.t. student_out)``.
    """
    g = _gather(layout)
    n = teacher_q.shape[0]
    t = teacher_q[:, g.index]
    present = ~np.isnan(t[:, :, 0])
    valid = g.valid[None, :, :] & present[:, :, None]
    t = np.where(valid, t, -np.inf)
    t_safe = np.where(present[:, :, None], t, 0.0)
    s = np.where(g.valid[None, :, :], student_out[:, g.index], -np.inf)
    with np.errstate(invalid="ignore"):
        log_p = nn.log_softmax(t_safe / tau)
        p = np.exp(log_p)
        log_q = nn.log_softmax(s)
        terms = np.where(valid, p * (log_p - log_q), 0.0)
    loss = float(terms.sum() / n)
    head_grad = np.where(valid, np.exp(log_q) - p, 0.0) / n
    grad = np.zeros_like(student_out)
    np.add.at(grad, (slice(None), g.index[g.valid]), head_grad[:, g.valid])
    return max(loss, 0.0), grad


def distill(buf: ReplayBuffer, student: nn.QNet, params: EnvParams, tau: float = 20.0,
            epochs: int = 300, lr: float = 1.0, rng: Optional[np.random.Generator] = None,
            batch_size: int = 32, holdout: float = 0.1) -> DistillResult:
    """Train ``student`` on the buffer's teacher Q-vectors with the tempered KL loss."""
    if not tau > 0:
        raise ValueError("temperature must be > 0")
    if not buf.store_q:
        raise ValueError("buffer holds no teacher Q-values")
    rng = rng if rng is not None else np.random.default_rng(0)
    cols = _student_columns(buf, student)
    slots = buf.ordered_slots()
    perm = rng.permutation(len(slots))
    n_hold = int(round(holdout * len(slots)))
    holdout_idx, train_idx = np.sort(perm[:n_hold]), np.sort(perm[n_hold:])
    x_all = features(buf.obs[slots], params)
    tq_all = buf.teacher_q[slots]
    curve = []
    for _ in range(epochs):
        order = rng.permutation(train_idx)
        losses, weights = [], []
        for start in range(0, len(order), batch_size):
            rows = order[start:start + batch_size]
            out, acts = nn.forward_batch(student, x_all[rows])
            loss, grad_b = kl_batch(tq_all[rows], out[:, cols], buf.layout, tau)
            grad = np.zeros_like(out)
            grad[:, cols] = grad_b
            nn.sgd_step(student, nn.backward(student, acts, grad), lr)
            losses.append(loss)
            weights.append(len(rows))
        curve.append(float(np.average(losses, weights=weights)) if losses else 0.0)
    student.check_finite()
    result = DistillResult(student, curve, slots[train_idx], slots[holdout_idx])
    if n_hold:
        result.agreement = argmax_agreement(buf, student, params, slots[holdout_idx])
    return result


def argmax_agreement(buf: ReplayBuffer, student: nn.QNet, params: EnvParams, slots) -> dict:
    """Fraction of records where student and teacher argmax coincide, per head."""
    slots = np.asarray(slots)
    cols = _student_columns(buf, student)
    out, _ = nn.forward_batch(student, features(buf.obs[slots], params))
    out = out[:, cols]
    tq = buf.teacher_q[slots]
    result = {}
    for h in buf.layout:
        sl = buf.layout.slice(h.name)
        mask = ~np.isnan(tq[:, sl.start])
        if not mask.any():
            continue
        t_arg = np.argmax(tq[mask, sl], axis=1)
        s_arg = np.argmax(out[mask, sl], axis=1)
        result[h.name] = float(np.mean(t_arg == s_arg))
    return result


def loss_non_increasing(curve: Sequence[float], window: int = 5, tol: float = 1e-3) -> bool:
    """True when the trailing moving average never rises by more than ``tol``."""
    c = np.asarray(curve, dtype=float)
    if c.size < 2:
        return True
    w = max(1, min(window, c.size))
    ma = np.convolve(c, np.ones(w) / w, mode="valid")
    return bool(np.all(np.diff(ma) <= tol))


# -- buffer persistence ------------------------------------------------------

_BUF_MAGIC = b"XBUF"
_BUF_VERSION = 1


def _record_dtype(obs_width: int, heads: int, total: int) -> np.dtype:
    return np.dtype([
        ("obs", "<f8", (obs_width,)), ("next_obs", "<f8", (obs_width,)),
        ("actions", "<i4", (heads,)), ("reward", "<f8"), ("done", "u1"),
        ("source", "<u2"), ("teacher_q", "<f8", (total,)),
    ])


def save_buffer(buf: ReplayBuffer, path) -> None:
    """Binary layout: magic, version, header length, record count, JSON header, fixed-width records."""
    slots = buf.ordered_slots()
    dt = _record_dtype(buf.obs_width, len(buf.layout), buf.layout.total)
    rec = np.zeros(len(slots), dtype=dt)
    rec["obs"] = buf.obs[slots]
    rec["next_obs"] = buf.next_obs[slots]
    rec["actions"] = buf.actions[slots]
    rec["reward"] = buf.rewards[slots]
    rec["done"] = buf.dones[slots]
    rec["source"] = buf.source[slots]
    rec["teacher_q"] = buf.teacher_q[slots] if buf.store_q else np.nan
    header = json.dumps({
        "version": _BUF_VERSION, "obs_width": buf.obs_width,
        "head_layout": buf.layout.to_json(), "sources": buf.sources,
        "record_size": dt.itemsize,
    }, sort_keys=True).encode()
    with atomic_path(path) as tmp, tmp.open("wb") as fh:
        fh.write(_BUF_MAGIC + struct.pack("<IIQ", _BUF_VERSION, len(header), len(slots)))
        fh.write(header)
        fh.write(rec.tobytes())


def load_buffer(path) -> ReplayBuffer:
    data = Path(path).read_bytes()
    if data[:4] != _BUF_MAGIC:
        raise ValueError(f"{path}: not a transition buffer file")
    version, hlen, count = struct.unpack_from("<IIQ", data, 4)
    if version != _BUF_VERSION:
        raise ValueError(f"{path}: unsupported buffer version {version}")
    start = 4 + struct.calcsize("<IIQ")
    header = json.loads(data[start:start + hlen])
    layout = nn.HeadLayout.from_json(header["head_layout"])
    dt = _record_dtype(header["obs_width"], len(layout), layout.total)
    if dt.itemsize != header["record_size"]:
        raise ValueError(f"{path}: record size mismatch")
    rec = np.frombuffer(data, dtype=dt, count=count, offset=start + hlen)
    buf = ReplayBuffer(max(count, 1), header["obs_width"], layout, store_q=True)
    buf.sources = list(header["sources"])
    buf.obs[:count] = rec["obs"]
    buf.next_obs[:count] = rec["next_obs"]
    buf.actions[:count] = rec["actions"]
    buf.rewards[:count] = rec["reward"]
    buf.dones[:count] = rec["done"].astype(bool)
    buf.source[:count] = rec["source"]
    buf.teacher_q[:count] = rec["teacher_q"]
    buf._size = count
    buf._next = count % buf.capacity
    return buf


# -- stage 4 -----------------------------------------------------------------

@dataclass
class EvalTrace:
    rates: np.ndarray
    serving: np.ndarray
    pf: np.ndarray
    arbiter: Optional[Arbiter]


def run_xapps(xapps: Sequence[XApp], env: CellularEnv, steps: int,
              policy: Optional[MitigationPolicy]) -> EvalTrace:
    """Run greedy xApps for ``steps`` network steps.

    With a policy every round goes through an :class:`Arbiter` (a rollback
    costs an extra network step). Without one, a single xApp acts directly;
    several xApps are merged by listing order with no rollback.
    """
    if not xapps:
        raise ValueError("need at least one xApp")
    params = env.params
    arbiter = None
    if policy is not None or len(xapps) > 1:
        policy = policy or MitigationPolicy(priority=tuple(x.name for x in xapps), rollback=False)
        arbiter = Arbiter(policy, params.slot_names)
    rates = np.zeros((steps, params.num_users))
    serving = np.zeros((steps, params.num_users), dtype=np.int64)
    pf = np.zeros(steps)
    logged = 0
    since_reset = 0
    obs = env.reset()
    last: dict[str, np.ndarray] = {}
    round_no = 0
    while logged < steps:
        if since_reset >= params.episode_len:
            obs = env.reset()
            since_reset = 0
            last = {}
            if arbiter is not None:
                arbiter.new_episode()
        idxs = {x.name: x.act(obs, last.get(x.peer)) for x in xapps}
        if arbiter is None:
            x = xapps[0]
            obs, _, m = env.step(to_joint_action(x.layout, idxs[x.name], params))
            metrics = [m]
        else:
            props = [proposal(x.name, x.layout, idxs[x.name], round_no) for x in xapps]
            verdict = arbiter.arbitrate(props, env)
            obs = verdict.observation
            metrics = verdict.metrics
        last = idxs
        round_no += 1
        for m in metrics:
            if logged >= steps:
                break
            rates[logged] = m.rates
            serving[logged] = m.serving
            pf[logged] = m.reward
            logged += 1
            since_reset += 1
    return EvalTrace(rates, serving, pf, arbiter)


def evaluate(xapps: Sequence[XApp], env: CellularEnv, steps: int,
             thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
             policy: Optional[MitigationPolicy] = None, scheme: str = "scheme", seed: int = 0,
             bin_edges: Sequence[float] = DEFAULT_BIN_EDGES, per_step: bool = False) -> EvalMetrics:
    if not len(thresholds):
        raise ValueError("need at least one threshold")
    trace = run_xapps(xapps, env, steps, policy)
    arb = trace.arbiter
    return EvalMetrics.from_log(
        scheme, seed, trace.rates, trace.serving, trace.pf, thresholds, bin_edges,
        direct_conflicts=arb.direct_conflicts if arb else 0,
        direct_losers=arb.direct_losers if arb else 0,
        rollbacks=arb.rollbacks if arb else 0, per_step=per_step,
    )
