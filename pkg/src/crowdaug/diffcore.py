"""Dense float64 tensors with reverse-mode autodiff, Adam, and gradient checks.

The compute graph is kept implicitly: every Tensor produced by an op holds
references to its parent tensors plus a closure mapping the output gradient to
parent gradients. ``backward`` walks the graph in reverse topological order
and accumulates into the ``.grad`` slots of parameter leaves. Repeated
``backward`` calls keep accumulating until the slots are zeroed.

Everything is float64 and single-threaded; stochastic ops take an explicit
``numpy.random.Generator`` so runs are bit-reproducible per seed.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

Array = np.ndarray


def _as_f64(x) -> Array:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """One node of the compute graph wrapping a dense float64 array."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward_fn=None):
        self.data = _as_f64(data)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self.parents: tuple[Tensor, ...] = tuple(parents)
        self._backward: Callable[[Array], tuple] | None = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, leaf={self._backward is None})"

    # arithmetic sugar; non-Tensor operands become constants
    def __add__(self, other):
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum gradient over axes that numpy broadcasting expanded."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitive ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(out, parents=(a, b), backward_fn=back)


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.data, parents=(a,), backward_fn=lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor(out, parents=(a, b), backward_fn=back)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def back(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return Tensor(out, parents=(a, b), backward_fn=back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def back(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor(out, parents=(a, b), backward_fn=back)


def t_exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor(out, parents=(a,), backward_fn=lambda g: (g * out,))


def t_log(a: Tensor) -> Tensor:
    out = np.log(a.data)
    return Tensor(out, parents=(a,), backward_fn=lambda g: (g / a.data,))


def t_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor(out, parents=(a,), backward_fn=back)


def t_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(t_sum(a, axis=axis, keepdims=keepdims), Tensor(1.0 / count))


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(out, parents=tuple(parts), backward_fn=back)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return Tensor(out, parents=(a,), backward_fn=lambda g: (g.reshape(a.shape),))


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows (leading-axis entries) by integer index, with repeats."""
    idx = np.asarray(idx, dtype=np.int64)
    out = a.data[idx]

    def back(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return Tensor(out, parents=(a,), backward_fn=back)


def pick(a: Tensor, idx) -> Tensor:
    """Per-row element selection: out[b] = a[b, idx[b]]."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(a.shape[0])
    out = a.data[rows, idx]

    def back(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, idx), g)
        return (ga,)

    return Tensor(out, parents=(a,), backward_fn=back)


def rowwise_matvec(m: Tensor, v: Tensor) -> Tensor:
    """Per-row matrix-vector product: out[b] = m[b] @ v[b]."""
    out = np.einsum("bij,bj->bi", m.data, v.data)

    def back(g):
        gm = np.einsum("bi,bj->bij", g, v.data)
        gv = np.einsum("bij,bi->bj", m.data, g)
        return gm, gv

    return Tensor(out, parents=(m, v), backward_fn=back)


def rowwise_bilinear(u: Tensor, m: Tensor, v: Tensor) -> Tensor:
    """Per-row bilinear form: out[b] = u[b] @ m[b] @ v[b]."""
    out = np.einsum("bi,bij,bj->b", u.data, m.data, v.data)

    def back(g):
        gu = np.einsum("b,bij,bj->bi", g, m.data, v.data)
        gm = np.einsum("b,bi,bj->bij", g, u.data, v.data)
        gv = np.einsum("b,bi,bij->bj", g, u.data, m.data)
        return gu, gm, gv

    return Tensor(out, parents=(u, m, v), backward_fn=back)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values to [lo, hi]; gradient is zero where the clip binds."""
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return Tensor(out, parents=(a,), backward_fn=lambda g: (g * inside,))


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; call only in train mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return Tensor(a.data * mask, parents=(a,), backward_fn=lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# softmax / entropy (work on plain arrays and on graph tensors)


def _softmax_data(x: Array, axis: int) -> Array:
    shifted = x - x.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=axis, keepdims=True)


def _log_softmax_data(x: Array, axis: int) -> Array:
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _check_finite_logits(x: Array) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError("softmax input contains non-finite values")


def softmax(x, axis: int = -1):
    """Exp-normalized probabilities along ``axis`` (max-shifted for stability)."""
    if isinstance(x, Tensor):
        _check_finite_logits(x.data)
        s = _softmax_data(x.data, axis)

        def back(g):
            dot = (g * s).sum(axis=axis, keepdims=True)
            return (s * (g - dot),)

        return Tensor(s, parents=(x,), backward_fn=back)
    x = _as_f64(x)
    if x.size == 0:
        raise ValueError("softmax input must have length >= 1")
    _check_finite_logits(x)
    return _softmax_data(x, axis)


def log_softmax(x, axis: int = -1):
    if isinstance(x, Tensor):
        _check_finite_logits(x.data)
        ls = _log_softmax_data(x.data, axis)

        def back(g):
            return (g - np.exp(ls) * g.sum(axis=axis, keepdims=True),)

        return Tensor(ls, parents=(x,), backward_fn=back)
    x = _as_f64(x)
    _check_finite_logits(x)
    return _log_softmax_data(x, axis)


def relu(x):
    if isinstance(x, Tensor):
        mask = x.data > 0
        return Tensor(x.data * mask, parents=(x,), backward_fn=lambda g: (g * mask,))
    return np.maximum(_as_f64(x), 0.0)


def _sigmoid_data(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x):
    if isinstance(x, Tensor):
        s = _sigmoid_data(x.data)
        return Tensor(s, parents=(x,), backward_fn=lambda g: (g * s * (1.0 - s),))
    return _sigmoid_data(_as_f64(x))


def entropy(p, axis: int = -1):
    """Shannon entropy in nats, with 0*log(0) = 0."""
    p = _as_f64(p)
    if np.any(p < 0):
        raise ValueError("entropy input has negative entries")
    if np.any(p > 1.0 + 1e-9):
        raise ValueError("entropy input has entries > 1")
    sums = p.sum(axis=axis)
    if not np.allclose(sums, 1.0, atol=1e-9):
        raise ValueError("entropy input rows must sum to 1 within 1e-9")
    terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=axis)


def sample_categorical(rng: np.random.Generator, probs: Array) -> Array:
    """Draw one class index per row of a (B, C) probability matrix."""
    probs = np.atleast_2d(_as_f64(probs))
    cum = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0])
    idx = (u[:, None] >= cum).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


# ---------------------------------------------------------------------------
# backward pass


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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
    """Reverse-mode sweep from a scalar loss into leaf ``.grad`` slots.

    Gradients accumulate across calls; zero the slots between independent
    losses.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    order = _toposort(loss)
    grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg


# ---------------------------------------------------------------------------
# parameters


class ParamStore:
    """Named leaf tensors with gradient slots; insertion order is preserved."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def add_tensor(self, name: str, t: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state_dict(self) -> dict[str, Array]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_state_dict(self, state: dict[str, Array]) -> None:
        for k, t in self._params.items():
            arr = _as_f64(state[k])
            if arr.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {k!r}: {arr.shape} vs {t.data.shape}")
            t.data = arr.copy()

    def randomize(self, rng: np.random.Generator, scale: float = 0.1) -> None:
        """Overwrite every parameter with small random values (test helper)."""
        for t in self._params.values():
            t.data = rng.normal(scale=scale, size=t.data.shape)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for k, t in self._params.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    @staticmethod
    def union(*stores: "ParamStore") -> "ParamStore":
        """Merge stores for joint optimization; shared tensors appear once."""
        merged = ParamStore()
        seen: set[int] = set()
        for i, store in enumerate(stores):
            for name, t in store.items():
                if id(t) in seen:
                    continue
                seen.add(id(t))
                merged.add_tensor(f"{i}.{name}" if name in merged._params else name, t)
        return merged


def glorot_uniform(rng: np.random.Generator, shape, fan_in=None, fan_out=None) -> Array:
    if fan_in is None:
        fan_in = shape[-2] if len(shape) >= 2 else shape[-1]
    if fan_out is None:
        fan_out = shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """First/second-moment accumulators with bias-correction step counter."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)


def adam_step(params: dict[str, Array], grads: dict[str, Array], state: AdamState) -> None:
    """One in-place Adam update over named arrays."""
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name!r}: {g.shape} vs {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


class Adam:
    """Adam over a ParamStore, reading the ``.grad`` slots filled by backward."""

    def __init__(self, store: ParamStore, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self) -> None:
        params = {k: t.data for k, t in self.store.items()}
        grads = {k: t.grad for k, t in self.store.items() if t.grad is not None}
        adam_step(params, grads, self.state)

    def zero_grad(self) -> None:
        self.store.zero_grad()

    def state_dict(self) -> dict:
        s = self.state
        return {
            "lr": s.lr, "beta1": s.beta1, "beta2": s.beta2, "eps": s.eps,
            "step_count": s.step_count,
            "m": {k: a.copy() for k, a in s.m.items()},
            "v": {k: a.copy() for k, a in s.v.items()},
        }

    def load_state_dict(self, d: dict) -> None:
        self.state = AdamState(
            lr=d["lr"], beta1=d["beta1"], beta2=d["beta2"], eps=d["eps"],
            step_count=d["step_count"],
            m={k: a.copy() for k, a in d["m"].items()},
            v={k: a.copy() for k, a in d["v"].items()},
        )


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(fn: Callable[[], Tensor], params: ParamStore | Iterable[Tensor],
               eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` must rebuild the loss from the current parameter values and be
    deterministic (freeze any random inputs before calling). Relative error is
    |analytic - numeric| / (|numeric| + 1e-8), maximized over every entry of
    every parameter.
    """
    if not 0.0 < eps <= 1e-3:
        raise ValueError(f"eps must be in (0, 1e-3], got {eps}")
    if isinstance(params, ParamStore):
        named = list(params.items())
    else:
        named = [(f"param{i}", t) for i, t in enumerate(params)]

    for _, t in named:
        t.grad = None
    loss = fn()
    backward(loss)
    analytic = {name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
                for name, t in named}

    worst = 0.0
    for name, t in named:
        flat = t.data.reshape(-1)
        aflat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = fn().item()
            flat[i] = orig - eps
            f_minus = fn().item()
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise ValueError(f"non-finite loss while perturbing parameter {name!r}")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            rel = abs(aflat[i] - numeric) / (abs(numeric) + 1e-8)
            worst = max(worst, rel)
    for _, t in named:
        t.grad = None
    return worst
