"""Small reverse-mode autodiff engine on top of numpy (float64 only).

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients.  :func:`backward`
walks that tape in reverse topological order.

Only the shapes the encoder needs are supported: vectors, row-major
matrices, numpy-style broadcasting for elementwise ops, row gathers and
segment reductions over edge lists.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import ContractError, DimensionError

DTYPE = np.float64
LEAKY_SLOPE = 0.01

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple["Tensor", ...] = (), _backward: BackwardFn | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis: int | None = None) -> "Tensor":
        return tsum(self, axis)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], fn: BackwardFn) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=fn)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                         _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def back(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out, (a, b), back)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    scale = np.where(x.data > 0, 1.0, slope)
    return _make(x.data * scale, (x,), lambda g: (g * scale,))


def identity(x: Tensor) -> Tensor:
    return x


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x) without overflow; exact to rounding for large x."""
    d = x.data
    out = np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d)))
    e = np.exp(-np.abs(d))
    sig = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (x,), lambda g: (g * sig,))


# --- reductions and shape --------------------------------------------------

def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    out = x.data.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _make(out, (x,), back)


def mean(x: Tensor) -> Tensor:
    return tsum(x) * (1.0 / x.data.size)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(tensors), back)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise DimensionError(f"matmul supports 1-D/2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def back(g):
        ad, bd = a.data, b.data
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 1 and bd.ndim == 2:
            return bd @ g, np.outer(ad, g)
        if ad.ndim == 2 and bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        return g * bd, g * ad

    return _make(out, (a, b), back)


def rowdot(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise dot products of two (n, d) matrices -> (n,)."""
    if a.shape != b.shape:
        raise DimensionError(f"rowdot needs equal shapes, got {a.shape} and {b.shape}")
    return tsum(mul(a, b), axis=-1)


# --- graph gathers / segment ops ------------------------------------------

def scatter_add(idx: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    """``out[idx[e]] += values[e]`` with a fixed summation order."""
    if values.ndim == 1:
        return np.bincount(idx, weights=values, minlength=n).astype(DTYPE, copy=False)
    out = np.zeros((n,) + values.shape[1:], dtype=DTYPE)
    if len(idx) == 0:
        return out
    order = np.argsort(idx, kind="stable")
    uniq, starts = np.unique(idx[order], return_index=True)
    out[uniq] = np.add.reduceat(values[order], starts, axis=0)
    return out


def segment_max(values: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    out = np.full(n, -np.inf)
    if len(idx) == 0:
        return out
    order = np.argsort(idx, kind="stable")
    uniq, starts = np.unique(idx[order], return_index=True)
    out[uniq] = np.maximum.reduceat(values[order], starts)
    return out


def take(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows ``x[idx]``; gradient scatters back with accumulation."""
    idx = np.asarray(idx, dtype=np.int64)
    out = x.data[idx]

    def back(g):
        return (scatter_add(idx, g, x.shape[0]),)

    return _make(out, (x,), back)


def segment_sum(x: Tensor, segments: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows of ``x`` into ``num_segments`` buckets; empty buckets are zero."""
    segments = np.asarray(segments, dtype=np.int64)
    if len(segments) != x.shape[0]:
        raise DimensionError(f"segment ids ({len(segments)}) do not match rows ({x.shape[0]})")
    out = scatter_add(segments, x.data, num_segments)
    return _make(out, (x,), lambda g: (g[segments],))


def segment_softmax(scores: Tensor, segments: np.ndarray, num_segments: int) -> Tensor:
    """Softmax of a 1-D score vector within each segment."""
    segments = np.asarray(segments, dtype=np.int64)
    s = scores.data
    if s.ndim != 1 or len(segments) != len(s):
        raise DimensionError("segment_softmax expects a 1-D score per segment id")
    peak = segment_max(s, segments, num_segments)
    e = np.exp(s - peak[segments])
    z = scatter_add(segments, e, num_segments)
    w = e / z[segments]

    def back(g):
        inner = scatter_add(segments, g * w, num_segments)
        return (w * (g - inner[segments]),)

    return _make(w, (scores,), back)


# --- backward --------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: "ParamStore | None" = None) -> dict[str, Tensor]:
    """Reverse-mode sweep from a scalar ``loss``.

    Returns a map from parameter path to gradient.  When ``params`` is given
    every path in it is present (zeros for parameters the loss does not
    touch); otherwise only named leaves reachable from the loss appear.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(_topo_order(loss)):
            g = grads.get(id(node))
            if g is None:
                continue
            if node._backward is None:
                leaves[id(node)] = node
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = np.array(pg, dtype=DTYPE).reshape(parent.shape)
    if params is not None:
        return {path: Tensor(grads[id(t)] if id(t) in grads else np.zeros_like(t.data))
                for path, t in params.items()}
    return {t.name: Tensor(grads[k]) for k, t in leaves.items() if t.name is not None}


# --- parameters ------------------------------------------------------------

class ParamStore(Mapping[str, Tensor]):
    """Immutable map of dotted parameter paths to leaf tensors.

    Iteration is lexicographic by path.  :meth:`subtree` returns a view over
    the same tensor objects, so gradients still resolve to full paths.
    """

    def __init__(self, tensors: Mapping[str, "Tensor | np.ndarray"] | None = None):
        items: dict[str, Tensor] = {}
        for path, t in (tensors or {}).items():
            if not path or path.strip() != path:
                raise ValueError(f"bad parameter path {path!r}")
            if isinstance(t, Tensor) and t.requires_grad and t.name == path and t._backward is None:
                items[path] = t
            else:
                data = t.data if isinstance(t, Tensor) else t
                items[path] = Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=path)
        self._items = dict(sorted(items.items()))

    def __getitem__(self, path: str) -> Tensor:
        try:
            return self._items[path]
        except KeyError:
            raise KeyError(f"no parameter at path {path!r}") from None

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def subtree(self, prefix: str) -> "ParamStore":
        head = prefix + "."
        view = ParamStore.__new__(ParamStore)
        view._items = {k[len(head):]: t for k, t in self._items.items() if k.startswith(head)}
        return view

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self._items.items()}

    def num_values(self) -> int:
        return sum(t.data.size for t in self._items.values())


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    r = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-r, r, size=(fan_in, fan_out))


def init_mlp(rng: np.random.Generator, prefix: str, widths: Sequence[int]) -> dict[str, np.ndarray]:
    """Weights for an MLP with layer widths ``widths[0] -> ... -> widths[-1]``."""
    if len(widths) < 2:
        raise DimensionError(f"an MLP needs at least input and output widths, got {list(widths)}")
    out: dict[str, np.ndarray] = {}
    for layer, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        out[f"{prefix}.{layer}.weight"] = glorot_uniform(rng, fan_in, fan_out)
        out[f"{prefix}.{layer}.bias"] = np.zeros(fan_out)
    return out


def mlp_layers(params: ParamStore) -> list[tuple[Tensor, Tensor]]:
    ids = sorted({int(k.split(".", 1)[0]) for k in params if k.split(".", 1)[0].isdigit()})
    if not ids or ids != list(range(len(ids))):
        raise DimensionError(f"MLP layers must be numbered 0..n-1, found {ids}")
    return [(params[f"{i}.weight"], params[f"{i}.bias"]) for i in ids]


def mlp_apply(params: ParamStore, x: Tensor,
              activation: Callable[[Tensor], Tensor] = leaky_relu) -> Tensor:
    """Affine + activation per layer, last layer affine only.

    ``params`` is the subtree holding ``<layer>.weight`` (in, out) and
    ``<layer>.bias`` (out,).
    """
    layers = mlp_layers(params)
    h = as_tensor(x)
    for i, (w, b) in enumerate(layers):
        if w.ndim != 2 or b.shape != (w.shape[1],):
            raise DimensionError(f"{w.name or 'weight'}: weight {w.shape} and bias {b.shape} disagree")
        if h.shape[-1] != w.shape[0]:
            raise DimensionError(
                f"{w.name or 'weight'}: expects input width {w.shape[0]}, got {h.shape[-1]}")
        h = add(matmul(h, w), b)
        if i < len(layers) - 1:
            h = activation(h)
    return h


# --- Adam ------------------------------------------------------------------

@dataclass(frozen=True)
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: ParamStore, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        zeros = {k: np.zeros_like(t.data) for k, t in params.items()}
        return cls(m=zeros, v={k: z.copy() for k, z in zeros.items()},
                   lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params: ParamStore, grads: Mapping[str, "Tensor | np.ndarray"],
              state: AdamState) -> tuple[ParamStore, AdamState]:
    """One bias-corrected Adam update; returns new params and state."""
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for path, p in params.items():
        if path not in grads:
            raise ContractError(f"missing gradient for parameter {path!r}")
        g = grads[path]
        g = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=DTYPE)
        if g.shape != p.shape or state.m[path].shape != p.shape:
            raise DimensionError(f"{path}: gradient/moment shape does not match parameter {p.shape}")
        m = b1 * state.m[path] + (1 - b1) * g
        v = b2 * state.v[path] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_params[path] = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[path], new_v[path] = m, v
    new_state = AdamState(m=new_m, v=new_v, step=t, lr=state.lr, beta1=b1, beta2=b2, eps=state.eps)
    return ParamStore(new_params), new_state


def finite_difference_check(objective: Callable[[ParamStore], Tensor], params: ParamStore,
                            entries: Iterable[tuple[str, tuple[int, ...]]],
                            step: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``objective`` rebuilds the scalar from a ParamStore so perturbed copies
    can be evaluated.  Relative error is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    analytic = backward(objective(params), params)
    base = params.arrays()
    worst = 0.0
    for path, index in entries:
        vals = []
        for sign in (1.0, -1.0):
            moved = {k: v.copy() for k, v in base.items()}
            moved[path][index] += sign * step
            vals.append(objective(ParamStore(moved)).item())
        numeric = (vals[0] - vals[1]) / (2 * step)
        a = float(analytic[path].data[index])
        worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
    return worst
