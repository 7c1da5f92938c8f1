"""Reverse-mode differentiation over float64 numpy arrays.

Every operation executed while a :class:`Tape` is active is recorded in
creation order, which is a valid topological order; :func:`backward_pass`
walks the record in reverse and accumulates gradients into every tensor that
requires them.  Outside a tape, operations evaluate eagerly and record
nothing, which is the inference path.

The primitive set is what the two message-passing model families need:
affine maps, the four activations, gated recurrent updates, row gathers and
segment sums over graph edges, per-edge matrix-vector products, softmax and
the mean-squared-error loss.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy import sparse
from scipy.special import expit

from .errors import ConfigurationError, ContractError, DomainError, ShapeError, TrainingError

__all__ = [
    "Tensor",
    "Tape",
    "GruParams",
    "Optimizer",
    "OptimizerConfig",
    "constant",
    "parameter",
    "backward_pass",
    "dense_affine",
    "matmul",
    "activation",
    "sigmoid",
    "tanh",
    "softplus",
    "shifted_softplus",
    "concat",
    "reshape",
    "tsum",
    "mean",
    "gather",
    "segment_sum",
    "edge_matvec",
    "softmax",
    "gru_step",
    "rbf_expand",
    "mse_loss",
    "uniform_init",
]

LN2 = math.log(2.0)

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A float64 array taking part in a differentiable computation."""

    __slots__ = ("data", "_grad", "requires_grad", "_parents", "_backward", "name", "node_id")

    def __init__(self, data, requires_grad: bool = True, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self._grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name
        self.node_id = None

    # gradients are materialised lazily; reading one always yields a full array
    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = None if value is None else np.asarray(value, dtype=np.float64)

    def zero_grad(self) -> None:
        self._grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        # never in place: incoming arrays may be shared between parents
        self._grad = g if self._grad is None else self._grad + g

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=False)


class Tape:
    """Ordered record of primitive applications.

    Used as a context manager; nested tapes shadow the outer one.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def record(self, t: Tensor) -> int:
        self.nodes.append(t)
        return len(self.nodes) - 1

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        for node in self.nodes:
            node._parents = ()
            node._backward = None
            node._grad = None
        self.nodes = []

    def backward(self, loss: Tensor, seed: float = 1.0) -> None:
        backward_pass(loss, self, seed=seed)


def _make(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    tape = _active_tape()
    out = Tensor.__new__(Tensor)
    out.data = data
    out._grad = None
    out.name = None
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out.node_id = tape.record(out)
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out.node_id = None
    return out


def backward_pass(loss: Tensor, tape: Tape | None = None, seed: float = 1.0) -> None:
    """Populate ``grad`` of every tensor reachable from ``loss``.

    The tape is reset afterwards; leaf gradients persist until zeroed.
    """
    tape = tape if tape is not None else _active_tape()
    if tape is None:
        raise ContractError("backward_pass needs a tape")
    if loss.data.size != 1:
        raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
    if loss.node_id is None or loss.node_id >= len(tape.nodes) or tape.nodes[loss.node_id] is not loss:
        raise ContractError("loss was not produced on this tape")
    loss._grad = np.full(loss.shape, float(seed))
    for node in reversed(tape.nodes[: loss.node_id + 1]):
        g = node._grad
        if g is None or node._backward is None:
            continue
        grads = node._backward(g)
        node._grad = None
        for parent, pg in zip(node._parents, grads):
            if pg is not None and parent.requires_grad:
                parent._accumulate(pg)
    tape.reset()


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(ad * bd, (a, b), backward)


def matmul(a, b) -> Tensor:
    """Matrix product of two 2-D tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not align")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def dense_affine(x, W, b=None) -> Tensor:
    """``x W^T + b`` for row vectors ``x`` (one row per item) and ``W`` of shape (out, in)."""
    x, W = _as_tensor(x), _as_tensor(W)
    if W.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != W.shape[1]:
        raise ShapeError(f"cannot apply weight of shape {W.shape} to input of shape {x.shape}")
    xd, Wd = x.data, W.data
    out = xd @ Wd.T
    if b is not None:
        b = _as_tensor(b)
        if b.shape not in ((W.shape[0],), (1, W.shape[0])):
            raise ShapeError(f"bias of shape {b.shape} does not match weight of shape {W.shape}")
        out = out + b.data
        bshape = b.shape
        parents = (x, W, b)
    else:
        parents = (x, W)

    def backward(g):
        gx = g @ Wd if x.requires_grad else None
        if W.requires_grad:
            gW = np.outer(g, xd) if xd.ndim == 1 else g.T @ xd
        else:
            gW = None
        if b is None:
            return gx, gW
        return gx, gW, _unbroadcast(g, bshape)

    return _make(out, parents, backward)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    s = expit(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    t = np.tanh(x.data)
    return _make(t, (x,), lambda g: (g * (1.0 - t * t),))


def softplus(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    return _make(np.logaddexp(0.0, xd), (x,), lambda g: (g * expit(xd),))


def shifted_softplus(x) -> Tensor:
    """``ln(0.5 e^x + 0.5)``, zero at the origin."""
    x = _as_tensor(x)
    xd = x.data
    return _make(np.logaddexp(0.0, xd) - LN2, (x,), lambda g: (g * expit(xd),))


_ACTIVATIONS = {
    "sigmoid": sigmoid,
    "tanh": tanh,
    "softplus": softplus,
    "shifted-softplus": shifted_softplus,
}


def activation(x, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigurationError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(x)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    ax = axis % data.ndim
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(data, tuple(ts), backward)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def take(x, index) -> Tensor:
    """Basic (non-fancy) indexing, e.g. ``x[:, 2]``."""
    x = _as_tensor(x)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        out[index] = g
        return (out,)

    return _make(np.array(x.data[index]), (x,), backward)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis=axis), 1.0 / n)


@lru_cache(maxsize=512)
def _cached_segment_matrix(key: bytes, n_segments: int) -> sparse.csr_matrix:
    ids = np.frombuffer(key, dtype=np.int64)
    n = ids.shape[0]
    return sparse.csr_matrix((np.ones(n), (ids, np.arange(n))), shape=(n_segments, n))


def _segment_matrix(ids: np.ndarray, n_segments: int) -> sparse.csr_matrix:
    # the same index arrays recur across layers and between forward and backward
    return _cached_segment_matrix(np.ascontiguousarray(ids, dtype=np.int64).tobytes(), n_segments)


def segment_sum(x, ids, n_segments: int) -> Tensor:
    """Sum rows of ``x`` into ``n_segments`` buckets given by ``ids``.

    Empty buckets are zero rows, which is how isolated nodes receive a zero
    message.
    """
    x = _as_tensor(x)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape[0] != x.shape[0]:
        raise ShapeError(f"segment ids of length {ids.shape[0]} for {x.shape[0]} rows")
    tail = x.shape[1:]
    if ids.size == 0:
        return _make(np.zeros((n_segments,) + tail), (x,), lambda g: (np.zeros(x.shape),))
    S = _segment_matrix(ids, n_segments)
    flat = x.data.reshape(x.shape[0], -1)
    out = np.asarray(S @ flat).reshape((n_segments,) + tail)
    return _make(out, (x,), lambda g: (g[ids],))


def gather(x, index) -> Tensor:
    """Rows ``x[index]``; the gradient scatters back with summation."""
    x = _as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]
    tail = x.shape[1:]

    def backward(g):
        if index.size == 0:
            return (np.zeros((n,) + tail),)
        S = _segment_matrix(index, n)
        return (np.asarray(S @ g.reshape(index.shape[0], -1)).reshape((n,) + tail),)

    return _make(x.data[index], (x,), backward)


_EDGE_CHUNK = 4096


def edge_matvec(A, inv, h) -> Tensor:
    """Per-edge product ``A[inv[e]] @ h[e]``.

    ``A`` holds one matrix per distinct edge feature vector, so crystals,
    whose edges share a handful of distances, never materialise one matrix
    per edge.
    """
    A, h = _as_tensor(A), _as_tensor(h)
    inv = np.asarray(inv, dtype=np.int64)
    if A.ndim != 3 or h.ndim != 2 or A.shape[2] != h.shape[1] or inv.shape[0] != h.shape[0]:
        raise ShapeError(f"edge_matvec shapes {A.shape}, {inv.shape}, {h.shape} do not align")
    Ad, hd = A.data, h.data
    E = hd.shape[0]
    out = np.empty((E, Ad.shape[1]))
    for s in range(0, E, _EDGE_CHUNK):
        sl = slice(s, s + _EDGE_CHUNK)
        out[sl] = np.einsum("eij,ej->ei", Ad[inv[sl]], hd[sl])

    def backward(g):
        gh = np.empty_like(hd) if h.requires_grad else None
        gA = np.zeros(Ad.shape) if A.requires_grad else None
        U = Ad.shape[0]
        for s in range(0, E, _EDGE_CHUNK):
            sl = slice(s, s + _EDGE_CHUNK)
            if gh is not None:
                gh[sl] = np.einsum("eij,ei->ej", Ad[inv[sl]], g[sl])
            if gA is not None:
                outer = (g[sl, :, None] * hd[sl, None, :]).reshape(g[sl].shape[0], -1)
                gA += np.asarray(_segment_matrix(inv[sl], U) @ outer).reshape(Ad.shape)
        return gA, gh

    return _make(out, (A, h), backward)


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (x,), backward)


def mse_loss(pred, target) -> Tensor:
    pred = _as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} differs from target shape {target.shape}")
    diff = pred - target
    return mean(diff * diff)


@dataclass
class GruParams:
    """Gated recurrent unit weights acting on the concatenation ``[h; m]``."""

    W_z: Tensor
    W_r: Tensor
    W_h: Tensor
    b_z: Tensor
    b_r: Tensor
    b_h: Tensor

    def __post_init__(self):
        shapes = {self.W_z.shape, self.W_r.shape, self.W_h.shape}
        if len(shapes) != 1 or self.W_z.ndim != 2:
            raise ShapeError(f"GRU weights must share one 2-D shape, got {sorted(shapes)}")
        d = self.W_z.shape[0]
        for b in (self.b_z, self.b_r, self.b_h):
            if b.shape != (d,):
                raise ShapeError(f"GRU bias shape {b.shape} does not match state size {d}")
        if self.W_z.shape[1] <= d:
            raise ShapeError(f"GRU weight shape {self.W_z.shape} leaves no room for an input")

    @property
    def state_size(self) -> int:
        return self.W_z.shape[0]

    @property
    def input_size(self) -> int:
        return self.W_z.shape[1] - self.W_z.shape[0]


def gru_step(h, m, p: GruParams) -> Tensor:
    """One gated update ``h' = (1 - z) h + z h~``."""
    h, m = _as_tensor(h), _as_tensor(m)
    if h.shape[-1] != p.state_size or m.shape[-1] != p.input_size:
        raise ShapeError(
            f"GRU with state {p.state_size} and input {p.input_size} got h {h.shape} and m {m.shape}"
        )
    hm = concat([h, m], axis=-1)
    z = sigmoid(dense_affine(hm, p.W_z, p.b_z))
    r = sigmoid(dense_affine(hm, p.W_r, p.b_r))
    cand = tanh(dense_affine(concat([r * h, m], axis=-1), p.W_h, p.b_h))
    return (1.0 - z) * h + z * cand


def rbf_expand(d, centers, gamma: float) -> np.ndarray:
    """Gaussian radial basis ``exp(-gamma (d - mu_k)^2)``; adds a trailing axis."""
    centers = np.asarray(centers, dtype=np.float64)
    if centers.size == 0:
        raise ConfigurationError("radial basis grid is empty")
    if np.any(np.diff(centers) <= 0):
        raise ConfigurationError("radial basis centers must be strictly increasing")
    d = np.asarray(d, dtype=np.float64)
    if np.any(d < 0):
        raise DomainError("distances must be non-negative")
    return np.exp(-gamma * (d[..., None] - centers) ** 2)


def uniform_init(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class OptimizerConfig:
    rule: str = "adam"
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.rule not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer rule {self.rule!r}")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning rate must be positive")


class Optimizer:
    """In-place SGD or Adam over a name-keyed parameter map."""

    def __init__(self, params: dict[str, Tensor], config: OptimizerConfig | None = None):
        self.params = params
        self.config = config or OptimizerConfig()
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        cfg = self.config
        grads = {k: p.grad for k, p in self.params.items()}
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for parameter {k!r}")
        self.t += 1
        for k, p in self.params.items():
            g = grads[k]
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p.data
            if cfg.rule == "sgd":
                p.data -= cfg.learning_rate * g
            else:
                self._m[k] = cfg.beta1 * self._m[k] + (1 - cfg.beta1) * g
                self._v[k] = cfg.beta2 * self._v[k] + (1 - cfg.beta2) * g * g
                mhat = self._m[k] / (1 - cfg.beta1**self.t)
                vhat = self._v[k] / (1 - cfg.beta2**self.t)
                p.data -= cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.eps)
            p.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def optimizer_step(optimizer: Optimizer) -> None:
    optimizer.step()
