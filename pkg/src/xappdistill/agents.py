"""DQN xApps: specs, epsilon-greedy control, replay memory and training loops.

A multi-head Q-network picks one index per owned slot. The scalar PF reward
is shared by every head; each head is regressed towards
``r + gamma * max_a Q_target,head(s', a)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import nn
from .env import KEEP, CellularEnv, EnvParams
from .mitigation import ActionProposal, Arbiter, MitigationPolicy


@dataclass(frozen=True)
class XAppSpec:
    name: str
    roles: tuple[str, ...]

    def layout(self, params: EnvParams) -> nn.HeadLayout:
        heads = []
        for role in ("handover", "rb", "power"):
            if role not in self.roles:
                continue
            if role == "handover":
                heads += [nn.Head(f"ho_{i}", params.num_bs + 1, role, i) for i in range(params.num_users)]
            elif role == "rb":
                heads += [nn.Head(f"rb_{i}", params.num_rb_options, role, i) for i in range(params.num_users)]
            else:
                heads += [nn.Head(f"pw_{j}", params.num_power_levels, role, j) for j in range(params.num_bs)]
        return nn.HeadLayout(heads)


XAPP1 = XAppSpec("xapp1", ("handover", "rb"))
XAPP2 = XAppSpec("xapp2", ("handover", "power"))
DISTILLED = XAppSpec("distilled", ("handover", "rb", "power"))


def full_layout(params: EnvParams) -> nn.HeadLayout:
    return DISTILLED.layout(params)


def features(obs: np.ndarray, params: EnvParams) -> np.ndarray:
    """Network input for an observation.

    The one-hot block passes through; linear SINR spans many decades, so it is
    fed as log10(max(SINR, 1e-6)) / 3 (0 at 0 dB, 1 per 30 dB); utilities are
    divided by 10 to land in [-1, 1].
    Works on a single observation or a batch (last axis).
    """
    obs = np.asarray(obs, dtype=float)
    k, b = params.num_users, params.num_bs
    n_onehot, n_sinr = k * (b + 1), k * b
    out = obs.copy()
    out[..., n_onehot:n_onehot + n_sinr] = np.log10(np.maximum(obs[..., n_onehot:n_onehot + n_sinr], 1e-6)) / 3.0
    out[..., n_onehot + n_sinr:] = obs[..., n_onehot + n_sinr:] / 10.0
    return out


def peer_features(layout: nn.HeadLayout, indices: Optional[np.ndarray]) -> np.ndarray:
    """Another xApp's last action indices scaled to [0, 1]; zeros before it has acted."""
    if indices is None:
        return np.zeros(len(layout))
    denom = np.maximum(layout.widths - 1, 1)
    return np.asarray(indices, dtype=float) / denom


class _Gather:
    """Padded (heads x max_width) index table for per-head argmax/max."""

    def __init__(self, layout: nn.HeadLayout):
        w = int(layout.widths.max())
        cols = np.arange(w)[None, :]
        self.valid = cols < layout.widths[:, None]
        self.index = np.where(self.valid, layout.offsets[:, None] + cols, 0)

    def padded(self, out: np.ndarray) -> np.ndarray:
        vals = out[..., self.index]
        return np.where(self.valid, vals, -np.inf)


def _gather(layout: nn.HeadLayout) -> _Gather:
    g = layout.cache.get("gather")
    if g is None:
        g = layout.cache["gather"] = _Gather(layout)
    return g


def greedy(net: nn.QNet, x: np.ndarray) -> np.ndarray:
    out, _ = nn.forward_batch(net, np.asarray(x, dtype=float)[None, :])
    return np.argmax(_gather(net.layout).padded(out[0]), axis=-1)


def select_action(net: nn.QNet, x, eps: float, rng: np.random.Generator) -> np.ndarray:
    """Per-head epsilon-greedy indices; greedy ties go to the lowest index."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    layout = net.layout
    u = rng.random(2 * len(layout))
    explore = u[:len(layout)] < eps
    random_idx = (u[len(layout):] * layout.widths).astype(np.int64)
    return np.where(explore, random_idx, greedy(net, x))


def to_joint_action(layout: nn.HeadLayout, indices, params: EnvParams) -> np.ndarray:
    """Scatter per-head indices into a full joint action; unowned slots stay KEEP."""
    key = ("slots", params.slot_names_key)
    cols = layout.cache.get(key)
    if cols is None:
        pos = {name: i for i, name in enumerate(params.slot_names)}
        cols = layout.cache[key] = np.array([pos[h.name] for h in layout], dtype=np.int64)
    action = np.full(params.action_length, KEEP, dtype=np.int64)
    action[cols] = indices
    return action


def proposal(name: str, layout: nn.HeadLayout, indices, step: int = 0) -> ActionProposal:
    return ActionProposal(name, {h.name: int(i) for h, i in zip(layout, indices)}, step)


# -- replay memory -----------------------------------------------------------

@dataclass
class Transition:
    observation: np.ndarray
    action_indices: np.ndarray  # one per head of the buffer layout, -1 where absent
    reward: float
    next_observation: np.ndarray
    done: bool = False
    teacher_q: Optional[np.ndarray] = None  # layout.total values, NaN where absent
    source_xapp: str = ""


class ReplayBuffer:
    """Bounded FIFO of transitions stored in preallocated arrays."""

    def __init__(self, capacity: int, obs_width: int, layout: nn.HeadLayout,
                 store_q: bool = False):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.obs_width = int(obs_width)
        self.layout = layout
        self.store_q = store_q
        self.obs = np.zeros((capacity, obs_width))
        self.next_obs = np.zeros((capacity, obs_width))
        self.actions = np.full((capacity, len(layout)), -1, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity, dtype=bool)
        self.source = np.zeros(capacity, dtype=np.int64)
        self.teacher_q = np.full((capacity, layout.total), np.nan) if store_q else None
        self.sources: list[str] = []
        self._next = 0
        self._size = 0

    def __len__(self):
        return self._size

    def _slot(self, i: int) -> int:
        if not -self._size <= i < self._size:
            raise IndexError(i)
        i %= self._size
        start = (self._next - self._size) % self.capacity
        return (start + i) % self.capacity

    def push(self, t: Transition) -> None:
        k = self._next
        obs = np.asarray(t.observation, dtype=float)
        if obs.shape != (self.obs_width,):
            raise ValueError(f"observation width {obs.shape} != {self.obs_width}")
        acts = np.asarray(t.action_indices, dtype=np.int64)
        if acts.shape != (len(self.layout),):
            raise ValueError("action indices do not match the buffer head layout")
        if np.any(acts >= self.layout.widths):
            raise ValueError("action index exceeds head width")
        self.obs[k] = obs
        self.next_obs[k] = t.next_observation
        self.actions[k] = acts
        self.rewards[k] = t.reward
        self.dones[k] = t.done
        if t.source_xapp not in self.sources:
            self.sources.append(t.source_xapp)
        self.source[k] = self.sources.index(t.source_xapp)
        if self.store_q:
            q = np.full(self.layout.total, np.nan) if t.teacher_q is None else np.asarray(t.teacher_q, dtype=float)
            self.teacher_q[k] = q
        self._next = (k + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def __getitem__(self, i: int) -> Transition:
        k = self._slot(i)
        return Transition(
            self.obs[k].copy(), self.actions[k].copy(), float(self.rewards[k]),
            self.next_obs[k].copy(), bool(self.dones[k]),
            None if self.teacher_q is None else self.teacher_q[k].copy(),
            self.sources[self.source[k]],
        )

    def __iter__(self):
        for i in range(self._size):
            yield self[i]

    def ordered_slots(self) -> np.ndarray:
        start = (self._next - self._size) % self.capacity
        return (start + np.arange(self._size)) % self.capacity

    def batch(self, slots) -> dict:
        slots = np.asarray(slots)
        out = {
            "obs": self.obs[slots], "actions": self.actions[slots], "reward": self.rewards[slots],
            "next_obs": self.next_obs[slots], "done": self.dones[slots], "source": self.source[slots],
        }
        if self.store_q:
            out["teacher_q"] = self.teacher_q[slots]
        return out

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict:
        """Uniform sample, without replacement inside one batch."""
        if self._size == 0:
            raise ValueError("cannot sample from an empty buffer")
        n = min(batch_size, self._size)
        picks = rng.choice(self._size, size=n, replace=False)
        return self.batch(self.ordered_slots()[picks])


# -- TD learning -------------------------------------------------------------

def td_loss_and_grads(net: nn.QNet, target_net: nn.QNet, batch: dict, gamma: float):
    """Batch-mean of the per-head squared TD errors summed over heads."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    actions = np.asarray(batch["actions"], dtype=np.int64)
    n = actions.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    layout = net.layout
    if actions.shape[1] != len(layout) or target_net.layout != layout:
        raise ValueError("batch/target head layout does not match the network")
    q_next, _ = nn.forward_batch(target_net, batch["next_obs"])
    best_next = np.maximum.reduceat(q_next, layout.offsets, axis=1)  # (n, heads)
    not_done = 1.0 - np.asarray(batch["done"], dtype=float)
    target = np.asarray(batch["reward"], dtype=float)[:, None] + gamma * not_done[:, None] * best_next

    out, acts = nn.forward_batch(net, batch["obs"])
    cols = layout.offsets[None, :] + actions
    rows = np.arange(n)[:, None]
    err = out[rows, cols] - target
    loss = float(np.sum(err ** 2) / n)
    grad_out = np.zeros_like(out)
    grad_out[rows, cols] = 2.0 * err / n
    return loss, nn.backward(net, acts, grad_out)


def td_train_step(net: nn.QNet, target_net: nn.QNet, batch: dict, gamma: float, lr: float,
                  grad_clip: Optional[float] = None) -> float:
    loss, grads = td_loss_and_grads(net, target_net, batch, gamma)
    nn.sgd_step(net, nn.clip_by_global_norm(grads, grad_clip), lr)
    return loss


# -- training loops ----------------------------------------------------------

@dataclass(frozen=True)
class TrainParams:
    episodes: int = 2000
    gamma: float = 0.95
    lr: float = 0.01
    batch_size: int = 32
    buffer_capacity: int = 50_000
    target_sync: int = 500
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_fraction: float = 0.5
    hidden: tuple[int, ...] = (50, 100)
    grad_clip: Optional[float] = 10.0
    learn_start: int = 500
    train_every: int = 1

    def epsilon(self, step: int, total_steps: int) -> float:
        horizon = self.eps_fraction * total_steps
        if horizon <= 0:
            return self.eps_end
        frac = min(step / horizon, 1.0)
        return self.eps_start + frac * (self.eps_end - self.eps_start)


@dataclass
class TrainResult:
    net: nn.QNet
    curve: list[tuple[int, float, float]] = field(default_factory=list)  # (episode, mean_reward, epsilon)


class _Learner:
    def __init__(self, spec: XAppSpec, params: EnvParams, hp: TrainParams, rng: np.random.Generator,
                 extra_inputs: int = 0):
        self.spec = spec
        self.layout = spec.layout(params)
        self.rng = rng
        self.hp = hp
        width = params.obs_width + extra_inputs
        self.net = nn.init((width,) + tuple(hp.hidden), self.layout, rng)
        self.target = self.net.copy()
        self.buffer = ReplayBuffer(hp.buffer_capacity, width, self.layout)
        self.updates = 0

    def act(self, x, eps):
        return select_action(self.net, x, eps, self.rng)

    def observe(self, x, idx, reward, x_next, step):
        self.buffer.push(Transition(x, idx, reward, x_next, False, None, self.spec.name))
        hp = self.hp
        if len(self.buffer) >= max(hp.learn_start, 1) and step % hp.train_every == 0:
            batch = self.buffer.sample(hp.batch_size, self.rng)
            td_train_step(self.net, self.target, batch, hp.gamma, hp.lr, hp.grad_clip)
            self.updates += 1
        # the target follows the environment-step clock, independent of train_every
        if step % hp.target_sync == 0:
            self.target.load_params_from(self.net)


def train_teacher(env: CellularEnv, spec: XAppSpec, hp: TrainParams, rng: np.random.Generator,
                  extra_inputs: int = 0) -> TrainResult:
    """Stage-1 training of one xApp alone; slots it does not own keep their defaults.

    ``extra_inputs`` appends that many zero features to the input, which
    matches a team learner whose peer never acts.
    """
    params = env.params
    learner = _Learner(spec, params, hp, rng, extra_inputs)
    pad = np.zeros(extra_inputs)
    total = hp.episodes * params.episode_len
    curve = []
    step = 0
    for ep in range(hp.episodes):
        x = np.concatenate([features(env.reset(), params), pad])
        rewards = []
        eps = hp.epsilon(step, total)
        for _ in range(params.episode_len):
            eps = hp.epsilon(step, total)
            idx = learner.act(x, eps)
            obs, reward, _ = env.step(to_joint_action(learner.layout, idx, params))
            x_next = np.concatenate([features(obs, params), pad])
            step += 1
            learner.observe(x, idx, reward, x_next, step)
            rewards.append(reward)
            x = x_next
        learner.net.check_finite()
        curve.append((ep, float(np.mean(rewards)), float(eps)))
    return TrainResult(learner.net, curve)


def train_team(env: CellularEnv, spec1: XAppSpec, spec2: XAppSpec, hp: TrainParams,
               rng: np.random.Generator, policy: Optional[MitigationPolicy] = None,
               frozen: Sequence[str] = ()) -> tuple[TrainResult, TrainResult]:
    """Joint training: each xApp also sees the other's latest action indices.

    Proposals are merged by an :class:`Arbiter` running ``policy`` (priority
    plus rollback monitoring). With ``policy=None`` proposals are merged in
    argument order and nothing is rolled back. A frozen xApp neither learns
    nor proposes, so its peer features stay at zero.
    """
    if spec1.name == spec2.name:
        raise ValueError("team learning needs two distinct xApps")
    params = env.params
    specs = (spec1, spec2)
    layouts = [s.layout(params) for s in specs]
    rngs = rng.spawn(2)
    learners = [_Learner(s, params, hp, r, extra_inputs=len(layouts[1 - i]))
                for i, (s, r) in enumerate(zip(specs, rngs))]
    active = [s.name not in frozen for s in specs]
    if policy is None:
        policy = MitigationPolicy(priority=(spec1.name, spec2.name), rollback=False)
    arbiter = Arbiter(policy, params.slot_names)
    total = hp.episodes * params.episode_len
    curves: list[list] = [[], []]
    step = 0
    for ep in range(hp.episodes):
        base = features(env.reset(), params)
        arbiter.new_episode()
        last: list[Optional[np.ndarray]] = [None, None]
        rewards = []
        eps = hp.epsilon(step, total)
        for _ in range(params.episode_len):
            eps = hp.epsilon(step, total)
            xs = [np.concatenate([base, peer_features(layouts[1 - i], last[1 - i])]) for i in range(2)]
            idxs = [learners[i].act(xs[i], eps) if active[i] else None for i in range(2)]
            props = [proposal(specs[i].name, layouts[i], idxs[i], step) for i in range(2) if active[i]]
            verdict = arbiter.arbitrate(props, env)
            for i in range(2):
                if active[i]:
                    last[i] = idxs[i]
            base = features(verdict.observation, params)
            step += 1
            for i in range(2):
                if active[i]:
                    x_next = np.concatenate([base, peer_features(layouts[1 - i], last[1 - i])])
                    learners[i].observe(xs[i], idxs[i], verdict.reward, x_next, step)
            rewards.append(verdict.reward)
        for i in range(2):
            learners[i].net.check_finite()
            curves[i].append((ep, float(np.mean(rewards)), float(eps)))
    return TrainResult(learners[0].net, curves[0]), TrainResult(learners[1].net, curves[1])


# -- deployed xApps ----------------------------------------------------------

class XApp:
    """A trained (or heuristic) controller as deployed in the network."""

    def __init__(self, spec: XAppSpec, net: nn.QNet, params: EnvParams,
                 peer_layout: Optional[nn.HeadLayout] = None, peer: Optional[str] = None):
        self.spec = spec
        self.name = spec.name
        self.params = params
        self.layout = spec.layout(params)
        if net.layout != self.layout:
            raise ValueError(f"{spec.name}: network heads do not match the xApp spec")
        self.peer_layout = peer_layout
        self.peer = peer
        extra = 0 if peer_layout is None else len(peer_layout)
        if net.input_width != params.obs_width + extra:
            raise ValueError(
                f"{spec.name}: network input width {net.input_width} != observation width {params.obs_width + extra}"
            )
        self.net = net

    def inputs(self, obs, peer_action=None) -> np.ndarray:
        x = features(obs, self.params)
        if self.peer_layout is not None:
            x = np.concatenate([x, peer_features(self.peer_layout, peer_action)])
        return x

    def q_values(self, obs, peer_action=None) -> np.ndarray:
        out, _ = nn.forward_batch(self.net, self.inputs(obs, peer_action)[None, :])
        return out[0]

    def act(self, obs, peer_action=None) -> np.ndarray:
        return greedy(self.net, self.inputs(obs, peer_action))


def random_policy_pf(env: CellularEnv, steps: int, rng: np.random.Generator) -> float:
    """Mean PF of a uniform-random joint action policy."""
    params = env.params
    limits = np.concatenate([
        np.full(params.num_users, params.num_bs + 1),
        np.full(params.num_users, params.num_rb_options),
        np.full(params.num_bs, params.num_power_levels),
    ])
    env.reset()
    rewards = []
    for t in range(steps):
        if t and t % params.episode_len == 0:
            env.reset()
        _, r, _ = env.step(rng.integers(0, limits))
        rewards.append(r)
    return float(np.mean(rewards))
