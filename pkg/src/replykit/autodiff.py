"""Minimal reverse-mode autodiff on dense numpy arrays.

Each operation returns a Tensor that records its parents and a vector-Jacobian
closure; the implicit DAG is the compute graph, and `backward` replays it in
reverse topological order exactly once per node. Training runs in float32;
`grad_check` temporarily promotes parameters to float64 so central differences
are meaningful at step 1e-4.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_FINITE_CHECKS = True


def set_finite_checks(enabled: bool) -> None:
    """Toggle NaN/Inf validation at op boundaries (on by default)."""
    global _FINITE_CHECKS
    _FINITE_CHECKS = enabled


class ShapeMismatch(ValueError):
    pass


class NonScalarLoss(ValueError):
    pass


class Rng:
    """Seeded PCG64 stream; identical seeds give identical masks and inits."""

    algorithm = "pcg64"

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def fork(self, label: str) -> "Rng":
        """Independent child stream derived from (seed, label)."""
        child = np.random.SeedSequence([self.seed, _label_key(label)])
        rng = Rng.__new__(Rng)
        rng.seed = self.seed
        rng._gen = np.random.Generator(np.random.PCG64(child))
        return rng

    def uniform(self, low: float, high: float, shape: tuple[int, ...]) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def random(self, shape: tuple[int, ...] | None = None) -> np.ndarray:
        return self._gen.random(size=shape)

    def integers(self, low: int, high: int | None = None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def shuffle(self, values: list) -> None:
        self._gen.shuffle(values)


def _label_key(label: str) -> int:
    key = 0
    for ch in label:
        key = (key * 131 + ord(ch)) % (2**31 - 1)
    return key


class Tensor:
    """Dense array node in the compute graph."""

    __slots__ = ("data", "grad", "_parents", "_vjp", "requires_grad")

    def __init__(
        self,
        data: np.ndarray,
        parents: tuple["Tensor", ...] = (),
        vjp: Callable[[np.ndarray], tuple] | None = None,
        requires_grad: bool = False,
    ):
        arr = np.asarray(data)
        if _FINITE_CHECKS and not np.isfinite(arr).all():
            raise ValueError("non-finite values at op boundary")
        self.data = arr
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._vjp = vjp
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    # -- arithmetic sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other, self), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return narrow(self, key)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class Parameter(Tensor):
    """Trainable tensor with a named, persistently allocated gradient buffer."""

    __slots__ = ("name",)

    def __init__(self, data: np.ndarray, name: str):
        super().__init__(np.asarray(data), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.shape})"


def tensor(values, dtype=None) -> Tensor:
    arr = np.asarray(values, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
    return Tensor(arr)


def constant(values) -> Tensor:
    """Wrap without casting; used for masks and precomputed buffers."""
    return Tensor(np.asarray(values))


def _coerce(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _coerce(b, a)
    return _coerce(a, b), b


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data
    return Tensor(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data - b.data
    return Tensor(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data * b.data
    return Tensor(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb
    return Tensor(out, (a, b), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return Tensor(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    return Tensor(a.data.T, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return Tensor(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def narrow(a: Tensor, key) -> Tensor:
    """Basic slicing/integer indexing; gradient scatters back into place."""
    out = a.data[key]
    def vjp(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)
    return Tensor(out, (a,), vjp)


def take_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    """Row gather that tolerates repeated indices (accumulating VJP)."""
    idx = np.asarray(indices)
    out = a.data[idx]
    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)
    return Tensor(out, (a,), vjp)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Look up rows of an embedding table by integer id."""
    return take_rows(table, ids)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))
    return Tensor(out, tuple(tensors), vjp)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return Tensor(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return Tensor(out, (a,), lambda g: (g * (a.data > 0.0),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return Tensor(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor(out, (a,), lambda g: (g * 0.5 / out,))


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data)
    return Tensor(out, (a,), lambda g: (g / (1.0 + np.exp(-a.data)),))


def clip_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); gradient flows only where a exceeds the floor."""
    out = np.maximum(a.data, floor)
    return Tensor(out, (a,), lambda g: (g * (a.data > floor),))


def tsum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        expanded = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(expanded, a.shape).copy(),)
    return Tensor(out, (a,), vjp)


def tmean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Constant-mask select; used for per-sample masking in batched recurrence."""
    m = np.asarray(mask)
    out = np.where(m, a.data, b.data)
    def vjp(g):
        return (_unbroadcast(g * m, a.shape), _unbroadcast(g * (1.0 - m), b.shape))
    return Tensor(out, (a, b), vjp)


def gather_labels(a: Tensor, labels: np.ndarray) -> Tensor:
    """Pick a[i, labels[i]] for each row i."""
    idx = np.asarray(labels)
    rows = np.arange(a.shape[0])
    out = a.data[rows, idx]
    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, idx), g)
        return (full,)
    return Tensor(out, (a,), vjp)


# ---------------------------------------------------------------------------
# Composites used across the model and objectives
# ---------------------------------------------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardization followed by an affine transform."""
    mu = tmean(x, axis=1, keepdims=True)
    centered = sub(x, mu)
    var = tmean(mul(centered, centered), axis=1, keepdims=True)
    normed = div(centered, sqrt(add(var, eps)))
    return add(mul(normed, gamma), beta)


def cosine_distance(u: Tensor, v: Tensor, eps: float = 1e-8) -> Tensor:
    """1 - u.v / max(|u||v|, eps); zero vectors are safe via the eps floor."""
    dot = tsum(mul(u, v))
    nu = sqrt(tsum(mul(u, u)))
    nv = sqrt(tsum(mul(v, v)))
    return sub(1.0, div(dot, clip_min(mul(nu, nv), eps)))


def cosine_similarity_matrix(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    """S[i, j] = a_i . b_j / max(|a_i||b_j|, eps), matching cosine_distance."""
    dots = matmul(a, transpose(b))
    na = sqrt(tsum(mul(a, a), axis=1, keepdims=True))
    nb = sqrt(tsum(mul(b, b), axis=1, keepdims=True))
    denom = clip_min(matmul(na, transpose(nb)), eps)
    return div(dots, denom)


@dataclass
class LstmParams:
    """One LSTM layer's weights; gate order along the last axis is i, f, g, o."""

    w_x: Parameter
    w_h: Parameter
    bias: Parameter

    @property
    def hidden(self) -> int:
        return self.w_h.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.w_x, self.w_h, self.bias]


def init_lstm_params(
    input_dim: int, hidden: int, rng: Rng, name: str, dtype=DEFAULT_DTYPE
) -> LstmParams:
    """Uniform(-0.08, 0.08) weights, zero biases except forget gate at +1."""
    w_x = rng.uniform(-0.08, 0.08, (input_dim, 4 * hidden)).astype(dtype)
    w_h = rng.uniform(-0.08, 0.08, (hidden, 4 * hidden)).astype(dtype)
    bias = np.zeros(4 * hidden, dtype=dtype)
    bias[hidden : 2 * hidden] = 1.0
    return LstmParams(
        w_x=Parameter(w_x, f"{name}.w_x"),
        w_h=Parameter(w_h, f"{name}.w_h"),
        bias=Parameter(bias, f"{name}.bias"),
    )


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, params: LstmParams) -> tuple[Tensor, Tensor]:
    """Standard LSTM step: returns (h', c')."""
    hidden = params.hidden
    if x.ndim != 2 or h.ndim != 2 or c.ndim != 2:
        raise ShapeMismatch("lstm_cell expects 2-D (batch, features) inputs")
    if x.shape[0] != h.shape[0] or h.shape != c.shape:
        raise ShapeMismatch(f"inconsistent batch shapes {x.shape} {h.shape} {c.shape}")
    if x.shape[1] != params.w_x.shape[0] or h.shape[1] != hidden:
        raise ShapeMismatch(f"inputs {x.shape}/{h.shape} do not fit params {params.w_x.shape}")
    z = add(add(matmul(x, params.w_x), matmul(h, params.w_h)), params.bias)
    i = sigmoid(z[:, :hidden])
    f = sigmoid(z[:, hidden : 2 * hidden])
    g = tanh(z[:, 2 * hidden : 3 * hidden])
    o = sigmoid(z[:, 3 * hidden :])
    c_next = add(mul(f, c), mul(i, g))
    h_next = mul(o, tanh(c_next))
    return h_next, c_next


def dropout(x: Tensor, keep_prob: float, rng: Rng) -> Tensor:
    """Inverted dropout: scaled at train time so inference needs no rescaling."""
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError("keep_prob must be in (0, 1]")
    if keep_prob == 1.0:
        return x
    mask = (rng.random(x.shape) < keep_prob).astype(x.dtype) / keep_prob
    return mul(x, constant(mask))


def softmax(a: Tensor, axis: int = 1) -> Tensor:
    shifted = sub(a, constant(a.data.max(axis=axis, keepdims=True)))
    e = exp(shifted)
    return div(e, tsum(e, axis=axis, keepdims=True))


def log_softmax(a: Tensor, axis: int = 1) -> Tensor:
    shifted = sub(a, constant(a.data.max(axis=axis, keepdims=True)))
    return sub(shifted, log(tsum(exp(shifted), axis=axis, keepdims=True)))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    return mul(tsum(gather_labels(log_softmax(logits), labels)), -1.0 / logits.shape[0])


# ---------------------------------------------------------------------------
# Backward pass and gradient checking
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dParam into every reachable parameter's .grad."""
    if loss.size != 1:
        raise NonScalarLoss(f"loss has shape {loss.shape}")
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._vjp is None:
            continue
        grads = node._vjp(node.grad)
        for parent, grad in zip(node._parents, grads):
            if grad is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad = parent.grad + grad
        if not isinstance(node, Parameter):
            node.grad = None  # free intermediates as we go


def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative post-order over grad-requiring nodes; each appears once."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_coordinates: int
    passed: bool
    worst_param: str = ""


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    tol: float = 1e-4,
    step: float = 1e-4,
    limit: int = 10_000,
    rng: Rng | None = None,
) -> GradCheckReport:
    """Central finite differences against the analytic gradients of f().

    f must be deterministic (dropout disabled). Parameters are promoted to
    float64 for the duration of the check and restored afterwards. Above
    `limit` total coordinates a random subsample is checked. Each estimate is
    Richardson-extrapolated from central differences at `step` and `step/2`,
    cancelling the O(step^2) truncation term that high-curvature losses would
    otherwise leak into the comparison. The error is
    |fd - analytic| / max(|fd|, |analytic|, 1): relative for large gradients,
    absolute for small ones.
    """
    originals = [p.data for p in params]
    for p in params:
        p.data = p.data.astype(np.float64)
    try:
        zero_grads(params)
        loss = f()
        backward(loss)
        analytic = [np.array(p.grad, dtype=np.float64, copy=True) for p in params]

        total = sum(p.size for p in params)
        picker = rng or Rng(0)
        max_rel = 0.0
        worst = ""
        checked = 0
        for p, an in zip(params, analytic):
            if total <= limit:
                coords = np.arange(p.size)
            else:
                quota = max(1, int(round(limit * p.size / total)))
                coords = picker.integers(0, p.size, size=quota)
            flat = p.data.reshape(-1)
            for idx in np.unique(coords):
                original = flat[idx]

                def central(h: float) -> float:
                    flat[idx] = original + h
                    plus = float(f().data)
                    flat[idx] = original - h
                    minus = float(f().data)
                    flat[idx] = original
                    return (plus - minus) / (2.0 * h)

                full, half = central(step), central(step / 2.0)
                fd = (4.0 * half - full) / 3.0
                an_val = float(an.reshape(-1)[idx])
                rel = abs(fd - an_val) / max(abs(fd), abs(an_val), 1.0)
                checked += 1
                if rel > max_rel:
                    max_rel = rel
                    worst = getattr(p, "name", "")
        return GradCheckReport(max_rel, checked, max_rel <= tol, worst)
    finally:
        for p, original in zip(params, originals):
            p.data = original
