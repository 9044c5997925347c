"""Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable op returns a new :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients. A
fresh graph is therefore built for every minibatch; :func:`backward` walks
it once in reverse topological order.

Values are float32 by default. Ops preserve the dtype of their inputs, so a
parameter store cast to float64 (see :meth:`ParamStore.astype`) yields a
float64 graph, which is what :func:`finite_diff_check` relies on.
"""

from __future__ import annotations

import contextlib
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError

_FLOAT_TYPES = (np.float32, np.float64)
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block; results are plain constants."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense row-major array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_TYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.backward_fn is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    """Wrap an op result, attaching it to the graph when any parent needs grad.

    ``backward_fn(g)`` must return one gradient (or None) per parent.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    else:
        out.requires_grad = False
        out.parents = ()
        out.backward_fn = None
    return out


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


# ---------------------------------------------------------------------------
# graph traversal


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every node after its inputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return make_node(A @ B, (a, b), bw, "matmul")


def _broadcast_kind(a: Tensor, b: Tensor, name: str) -> str:
    if a.shape == b.shape:
        return "same"
    if a.data.ndim == 2 and b.shape in ((a.shape[1],), (1, a.shape[1])):
        return "row"
    raise DimensionError(f"{name}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, kind: str, shape) -> np.ndarray:
    if kind == "same":
        return g
    return g.sum(axis=0).reshape(shape)


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return make_node(a.data + a.data.dtype.type(b), (a,), lambda g: (g,), "add_const")
    b = as_tensor(b, a)
    kind = _broadcast_kind(a, b, "add")

    def bw(g):
        return g, _unbroadcast(g, kind, b.shape)

    return make_node(a.data + b.data.reshape(-1) if kind == "row" else a.data + b.data, (a, b), bw, "add")


def sub(a: Tensor, b) -> Tensor:
    b = as_tensor(b, a)
    kind = _broadcast_kind(a, b, "sub")

    def bw(g):
        return g, -_unbroadcast(g, kind, b.shape)

    return make_node(a.data - (b.data.reshape(-1) if kind == "row" else b.data), (a, b), bw, "sub")


def mul(a: Tensor, b) -> Tensor:
    b = as_tensor(b, a)
    kind = _broadcast_kind(a, b, "mul")
    A = a.data
    B = b.data.reshape(-1) if kind == "row" else b.data

    def bw(g):
        ga = g * B if a.requires_grad else None
        gb = _unbroadcast(g * A, kind, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(A * B, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return make_node(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_node(np.where(mask, a.data, a.data.dtype.type(0)), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    half = a.data.dtype.type(0.5)
    s = half * (np.tanh(half * a.data) + 1)
    return make_node(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return make_node(t, (a,), lambda g: (g * (1 - t * t),), "tanh")


def identity(a: Tensor) -> Tensor:
    return a


def softmax_rows(a: Tensor) -> Tensor:
    if a.data.ndim != 2 or a.shape[1] < 1:
        raise DimensionError(f"softmax_rows needs a non-empty matrix, got {a.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return make_node(s, (a,), bw, "softmax")


def dropout(
    a: Tensor,
    rate: float,
    rng: Optional[np.random.Generator] = None,
    training: bool = True,
    mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Inverted dropout: zero each entry with prob ``rate``, scale survivors.

    Passing ``mask`` (already scaled, same shape as ``a``) bypasses sampling;
    finite-difference checks use this to hold the noise fixed.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if mask is None:
        if not training or rate == 0.0:
            return a
        if rng is None:
            raise ConfigError("dropout in training mode needs an rng")
        keep = rng.random(a.shape) >= rate
        mask = keep.astype(a.dtype) * a.dtype.type(1.0 / (1.0 - rate))
    elif mask.shape != a.shape:
        raise DimensionError(f"dropout mask {mask.shape} does not match input {a.shape}")
    mask = mask.astype(a.dtype, copy=False)
    return make_node(a.data * mask, (a,), lambda g: (g * mask,), "dropout")


def dropout_mask(shape, rate: float, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) * dtype(1.0 / (1.0 - rate))


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat_cols: row counts differ ({a.shape} vs {b.shape})")
    n = a.shape[1]
    return make_node(
        np.concatenate([a.data, b.data], axis=1), (a, b), lambda g: (g[:, :n], g[:, n:]), "concat"
    )


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2 or not 0 <= start <= stop <= a.shape[1]:
        raise DimensionError(f"slice_cols[{start}:{stop}] out of range for {a.shape}")

    def bw(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return make_node(a.data[:, start:stop], (a,), bw, "slice")


def sum_all(a: Tensor) -> Tensor:
    return make_node(
        a.data.sum(dtype=a.dtype).reshape(1), (a,), lambda g: (np.full_like(a.data, g[0]),), "sum"
    )


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    inv = a.dtype.type(1.0 / n)
    return make_node(
        (a.data.sum(dtype=a.dtype) * inv).reshape(1),
        (a,),
        lambda g: (np.full_like(a.data, g[0] * inv),),
        "mean",
    )


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared differences over every element."""
    if a.shape != b.shape:
        raise DimensionError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    val = (np.square(diff).sum(dtype=diff.dtype) / diff.dtype.type(n)).reshape(1)
    k = diff.dtype.type(2.0 / n)

    def bw(g):
        ga = diff * (k * g[0])
        return ga, -ga

    return make_node(val, (a, b), bw, "mse")


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "linear": identity,
    "softmax": softmax_rows,
}


# ---------------------------------------------------------------------------
# parameters and optimization


@dataclass
class AdamSlot:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


class ParamStore:
    """Named trainable tensors with gradient buffers and Adam slots.

    Names look like ``"enc.layer0.weight"``; the text before the first dot is
    the owning component, which is the unit of freezing.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.slots: dict[str, AdamSlot] = {}
        self.frozen: set[str] = set()

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        if "." not in name:
            raise ConfigError(f"parameter name {name!r} lacks a component prefix")
        t = Tensor(np.array(value), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    @staticmethod
    def component(name: str) -> str:
        return name.split(".", 1)[0]

    def components(self) -> list[str]:
        return list(dict.fromkeys(self.component(n) for n in self._params))

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad[...] = 0

    @contextlib.contextmanager
    def freezing(self, components):
        """Temporarily freeze the given components."""
        prev = set(self.frozen)
        self.frozen |= set(components)
        try:
            yield self
        finally:
            self.frozen = prev

    def trainable(self) -> list[str]:
        return [n for n in self._params if self.component(n) not in self.frozen]

    def astype(self, dtype) -> "ParamStore":
        """Deep copy with values cast to ``dtype``; optimizer state dropped."""
        out = ParamStore()
        for name, t in self._params.items():
            out.add(name, t.data.astype(dtype))
        out.frozen = set(self.frozen)
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_state_dict(self, values: dict[str, np.ndarray]) -> None:
        if set(values) != set(self._params):
            missing = sorted(set(self._params) - set(values))
            extra = sorted(set(values) - set(self._params))
            raise DimensionError(f"parameter names differ: missing={missing} extra={extra}")
        for n, v in values.items():
            t = self._params[n]
            if v.shape != t.shape:
                raise DimensionError(f"{n}: stored shape {v.shape} != expected {t.shape}")
            t.data[...] = v


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def clip_grad_norm(store: ParamStore, max_norm: float, names: Optional[Sequence[str]] = None) -> float:
    """Rescale the listed gradients so their joint L2 norm is at most ``max_norm``."""
    names = store.trainable() if names is None else names
    total = float(np.sqrt(sum(float(np.square(store[n].grad, dtype=np.float64).sum()) for n in names)))
    if max_norm > 0 and total > max_norm:
        f = max_norm / (total + 1e-12)
        for n in names:
            g = store[n].grad
            g *= g.dtype.type(f)
    return total


def optimizer_step(store: ParamStore, config: AdamConfig = AdamConfig()) -> None:
    """One Adam update on unfrozen entries, then clear every gradient."""
    b1, b2 = config.beta1, config.beta2
    for name in store.trainable():
        p = store[name]
        slot = store.slots.get(name)
        if slot is None:
            slot = store.slots[name] = AdamSlot(np.zeros_like(p.data), np.zeros_like(p.data))
        g = p.grad
        slot.t += 1
        slot.m *= b1
        slot.m += (1 - b1) * g
        slot.v *= b2
        slot.v += (1 - b2) * np.square(g)
        step = config.lr / (1 - b1**slot.t)
        denom = np.sqrt(slot.v / (1 - b2**slot.t))
        denom += config.eps
        p.data -= (step * slot.m / denom).astype(p.dtype, copy=False)
    store.zero_grad()


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(np.float32)


# ---------------------------------------------------------------------------
# randomness


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Counter-based generator for one named consumer of ``seed``.

    Streams for different names are independent, so adding a consumer never
    shifts the draws of existing ones.
    """
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(zlib.crc32(name.encode()),))
    return np.random.Generator(np.random.Philox(ss))


def rng_state(gen: np.random.Generator) -> dict:
    """JSON-safe snapshot of a generator's position."""
    return _jsonable(gen.bit_generator.state)


def restore_rng(state: dict) -> np.random.Generator:
    bg = np.random.Philox()
    st = dict(state)
    st["state"] = {k: np.asarray(v, dtype=np.uint64) for k, v in state["state"].items()}
    st["buffer"] = np.asarray(state["buffer"], dtype=np.uint64)
    bg.state = st
    return np.random.Generator(bg)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return [int(x) for x in obj.tolist()]
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


# ---------------------------------------------------------------------------
# gradient oracle


def finite_diff_check(
    build_loss: Callable[[ParamStore], Tensor], params: ParamStore, epsilon: float = 1e-3
) -> float:
    """Worst relative error between backprop and central differences.

    ``build_loss`` must be deterministic given the store (hold dropout masks
    fixed). The check runs on a float64 copy of ``params``.
    """
    if epsilon <= 0:
        raise ConfigError("epsilon must be positive")
    store = params.astype(np.float64)
    if len(store) == 0:
        return 0.0
    store.zero_grad()
    backward(build_loss(store))
    analytic = {n: store[n].grad.copy() for n in store}
    worst = 0.0
    with no_grad():
        for name in store:
            values = store[name].data
            flat = values.reshape(-1)
            ga = analytic[name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + epsilon
                lp = build_loss(store).item()
                flat[i] = orig - epsilon
                lm = build_loss(store).item()
                flat[i] = orig
                num = (lp - lm) / (2 * epsilon)
                denom = max(abs(ga[i]), abs(num), 1e-8)
                worst = max(worst, abs(ga[i] - num) / denom)
    return worst
