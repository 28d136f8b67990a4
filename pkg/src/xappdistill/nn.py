"""Multi-headed MLP with a shared ReLU trunk and linear output heads.

All heads read the last trunk activation. Head outputs are stored side by
side in a single output matrix; ``HeadLayout`` maps head names to column
slices of it.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional

import numpy as np

from .fileio import atomic_path

ROLES = ("handover", "rb", "power")


class NumericFault(FloatingPointError):
    """Raised when a parameter or gradient becomes NaN/Inf."""


@dataclass(frozen=True)
class Head:
    name: str
    width: int
    role: str
    index: int  # user index for handover/rb heads, BS index for power heads


class HeadLayout:
    """Ordered, uniquely named output heads."""

    def __init__(self, heads: Iterable[Head]):
        self.heads = tuple(heads)
        names = [h.name for h in self.heads]
        if len(set(names)) != len(names):
            raise ValueError("head names must be unique")
        for h in self.heads:
            if h.width < 1:
                raise ValueError(f"head {h.name} has width {h.width}")
            if h.role not in ROLES:
                raise ValueError(f"unknown head role {h.role!r}")
        widths = np.array([h.width for h in self.heads], dtype=np.int64)
        self.widths = widths
        self.offsets = np.concatenate([[0], np.cumsum(widths)[:-1]]).astype(np.int64)
        self.total = int(widths.sum())
        self._pos = {h.name: i for i, h in enumerate(self.heads)}
        self._hash = hash(self.heads)
        self.cache: dict = {}  # derived lookup tables, filled by users of the layout

    def __len__(self):
        return len(self.heads)

    def __iter__(self):
        return iter(self.heads)

    def __contains__(self, name):
        return name in self._pos

    def __eq__(self, other):
        return self is other or (isinstance(other, HeadLayout) and self.heads == other.heads)

    def __hash__(self):
        return self._hash

    def __repr__(self):
        return f"HeadLayout({[h.name for h in self.heads]})"

    @property
    def names(self) -> list[str]:
        return [h.name for h in self.heads]

    def position(self, name: str) -> int:
        return self._pos[name]

    def head(self, name: str) -> Head:
        return self.heads[self._pos[name]]

    def slice(self, name: str) -> slice:
        i = self._pos[name]
        return slice(int(self.offsets[i]), int(self.offsets[i] + self.widths[i]))

    def is_superset_of(self, other: "HeadLayout") -> bool:
        return all(h.name in self and self.head(h.name) == h for h in other)

    def to_json(self) -> list:
        return [[h.name, h.width, h.role, h.index] for h in self.heads]

    @classmethod
    def from_json(cls, data) -> "HeadLayout":
        return cls(Head(str(n), int(w), str(r), int(i)) for n, w, r, i in data)


class QNet:
    """Feed-forward Q-network: trunk ``input -> hidden...`` then one linear head per slot."""

    def __init__(self, input_width: int, hidden: tuple[int, ...], layout: HeadLayout,
                 weights: list[np.ndarray], biases: list[np.ndarray]):
        self.input_width = int(input_width)
        self.hidden = tuple(int(h) for h in hidden)
        self.layout = layout
        self.weights = weights  # trunk layers then the stacked head layer
        self.biases = biases

    @property
    def layer_spec(self) -> tuple[int, ...]:
        return (self.input_width,) + self.hidden

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def num_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "QNet":
        return QNet(self.input_width, self.hidden, self.layout,
                    [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def load_params_from(self, other: "QNet") -> None:
        for dst, src in zip(self.params(), other.params()):
            dst[...] = src

    def head_params(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        sl = self.layout.slice(name)
        return self.weights[-1][:, sl], self.biases[-1][sl]

    def check_finite(self) -> None:
        for p in self.params():
            if not np.all(np.isfinite(p)):
                raise NumericFault("non-finite network parameter")


def init(layer_spec, layout: HeadLayout, rng: np.random.Generator) -> QNet:
    """Uniform +-sqrt(6 / (fan_in + fan_out)) weights, zero biases."""
    layer_spec = tuple(int(w) for w in layer_spec)
    if len(layer_spec) < 1 or any(w < 1 for w in layer_spec):
        raise ValueError(f"layer widths must be >= 1, got {layer_spec}")
    sizes = list(layer_spec) + [layout.total]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return QNet(layer_spec[0], layer_spec[1:], layout, weights, biases)


def param_count(layer_spec, layout: HeadLayout) -> int:
    sizes = list(layer_spec) + [layout.total]
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


def forward_batch(net: QNet, x: np.ndarray):
    """Forward a batch; returns ``(outputs, activations)`` with outputs of shape (n, layout.total)."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != net.input_width:
        raise ValueError(f"input shape {x.shape} does not match input width {net.input_width}")
    acts = [x]
    h = x
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        h = np.maximum(h @ w + b, 0.0)
        acts.append(h)
    out = h @ net.weights[-1] + net.biases[-1]
    return out, acts


def forward(net: QNet, observation) -> dict[str, np.ndarray]:
    """Q-vector per head for a single observation."""
    obs = np.asarray(observation, dtype=float)
    if obs.ndim != 1:
        raise ValueError("forward expects a single observation vector")
    out, _ = forward_batch(net, obs[None, :])
    return split_heads(net.layout, out[0])


def split_heads(layout: HeadLayout, row: np.ndarray) -> dict[str, np.ndarray]:
    return {h.name: row[layout.slice(h.name)] for h in layout}


def backward(net: QNet, acts: list[np.ndarray], grad_out) -> list[np.ndarray]:
    """Gradients for ``net.params()`` given the loss gradient w.r.t. the outputs.

    ``grad_out`` is either an (n, layout.total) array or a mapping from head
    name to (n, width) arrays; heads missing from the mapping contribute zero.
    """
    n = acts[0].shape[0]
    if isinstance(grad_out, Mapping):
        g = np.zeros((n, net.layout.total))
        for name, gh in grad_out.items():
            sl = net.layout.slice(name)
            gh = np.asarray(gh, dtype=float).reshape(n, -1)
            if gh.shape[1] != sl.stop - sl.start:
                raise ValueError(f"gradient for head {name} has width {gh.shape[1]}")
            g[:, sl] = gh
    else:
        g = np.asarray(grad_out, dtype=float)
        if g.shape != (n, net.layout.total):
            raise ValueError(f"output gradient shape {g.shape} != {(n, net.layout.total)}")
    grads_w = [None] * len(net.weights)
    grads_b = [None] * len(net.biases)
    for layer in range(len(net.weights) - 1, -1, -1):
        a_in = acts[layer]
        grads_w[layer] = a_in.T @ g
        grads_b[layer] = g.sum(axis=0)
        if layer > 0:
            g = (g @ net.weights[layer].T) * (a_in > 0)
    out = []
    for gw, gb in zip(grads_w, grads_b):
        out += [gw, gb]
    return out


def clip_by_global_norm(grads: list[np.ndarray], max_norm: Optional[float]) -> list[np.ndarray]:
    if not max_norm:
        return grads
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        scale = max_norm / norm
        return [g * scale for g in grads]
    return grads


def sgd_step(net: QNet, grads: list[np.ndarray], lr: float) -> QNet:
    """In-place ``theta <- theta - lr * grad``; returns the same net."""
    params = net.params()
    if len(grads) != len(params):
        raise ValueError("gradient list does not match parameters")
    total = 0.0
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        total += float(g.sum())
    # NaN/Inf anywhere propagates into the sum
    if not np.isfinite(total):
        raise NumericFault("non-finite gradient")
    for p, g in zip(params, grads):
        p -= lr * g
    return net


def softmax_temp(q, tau: float = 1.0) -> np.ndarray:
    """Softmax of ``q / tau`` along the last axis (max-subtracted)."""
    if not tau > 0:
        raise ValueError("temperature must be > 0")
    z = np.asarray(q, dtype=float) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(q) -> np.ndarray:
    z = np.asarray(q, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def kl_loss(teacher_q, student_q, tau: float):
    """KL(softmax(teacher_q / tau) || softmax(student_q)) and its gradient w.r.t. student_q.

    Only the teacher is softened; the student distribution is the plain
    softmax of its Q-values. The teacher is a constant for the gradient.
    Works on single vectors or along the last axis of a batch (loss summed).
    """
    t = np.asarray(teacher_q, dtype=float)
    s = np.asarray(student_q, dtype=float)
    if t.shape != s.shape:
        raise ValueError(f"teacher/student shapes differ: {t.shape} vs {s.shape}")
    if not tau > 0:
        raise ValueError("temperature must be > 0")
    p = softmax_temp(t, tau)
    log_p = log_softmax(t / tau)
    loss = float(np.sum(p * (log_p - log_softmax(s))))
    grad = softmax_temp(s, 1.0) - p
    return max(loss, 0.0), grad


# -- serialization -----------------------------------------------------------

_MAGIC = b"XQNET"
_VERSION = 1


def save(net: QNet, path) -> None:
    header = json.dumps({
        "version": _VERSION,
        "layer_spec": list(net.layer_spec),
        "head_layout": net.layout.to_json(),
    }, sort_keys=True).encode()
    with atomic_path(path) as tmp, tmp.open("wb") as fh:
        fh.write(_MAGIC + struct.pack("<II", _VERSION, len(header)))
        fh.write(header)
        for p in net.params():
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes(order="C"))


def load(path, expected_layout: Optional[HeadLayout] = None,
         expected_input: Optional[int] = None) -> QNet:
    data = Path(path).read_bytes()
    if data[:len(_MAGIC)] != _MAGIC:
        raise ValueError(f"{path}: not a Q-network file")
    version, hlen = struct.unpack_from("<II", data, len(_MAGIC))
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    start = len(_MAGIC) + 8
    header = json.loads(data[start:start + hlen])
    layout = HeadLayout.from_json(header["head_layout"])
    spec = tuple(header["layer_spec"])
    if expected_layout is not None and layout != expected_layout:
        raise ValueError(f"{path}: head layout {layout} does not match expected {expected_layout}")
    if expected_input is not None and spec[0] != expected_input:
        raise ValueError(f"{path}: input width {spec[0]} != expected {expected_input}")
    flat = np.frombuffer(data, dtype="<f8", offset=start + hlen)
    sizes = list(spec) + [layout.total]
    if flat.size != param_count(spec, layout):
        raise ValueError(f"{path}: parameter block has {flat.size} values, expected {param_count(spec, layout)}")
    weights, biases, pos = [], [], 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(flat[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out).astype(float))
        pos += fan_in * fan_out
        biases.append(flat[pos:pos + fan_out].astype(float))
        pos += fan_out
    return QNet(spec[0], spec[1:], layout, weights, biases)
