"""Dense tensors with reverse-mode automatic differentiation.

Every loss and forward pass in this package is expressed through the ops
defined here. Shapes are always explicit: no implicit broadcasting between
operands (scalars enter via `scale`). 64-bit is the default precision so
finite-difference checks are meaningful; training may switch tensors to
32-bit.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeMismatchError",
    "no_grad",
    "add",
    "add_bias",
    "sub",
    "mul",
    "scale",
    "matmul",
    "embedding",
    "layer_norm",
    "softmax",
    "log_softmax",
    "masked_fill",
    "concat",
    "masked_mean",
    "gelu",
    "tanh",
    "reshape",
    "transpose",
    "tensor_sum",
    "detach",
    "cross_entropy",
    "kl_divergence",
    "check_gradients",
]

PROB_FLOOR = 1e-12  # clamp for log of probabilities (hard one-hot teachers)

_grad_enabled = True


class ShapeMismatchError(ValueError):
    """Raised when two operands have incompatible shapes; names both."""

    def __init__(self, op: str, shape_a, shape_b):
        super().__init__(f"{op}: incompatible shapes {tuple(shape_a)} and {tuple(shape_b)}")
        self.shapes = (tuple(shape_a), tuple(shape_b))


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A dense array plus the bookkeeping needed for backpropagation.

    The computation record is held implicitly: each tensor produced by an
    op keeps references to its parents and a backward rule. `backward()`
    linearizes the record in reverse topological order and accumulates
    gradients into every reachable `requires_grad` tensor. Repeated
    `backward()` calls accumulate into `.grad`; call `zero_grad()` to reset.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Populate `.grad` for every requires_grad leaf reachable from here."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._backward_fn is None:
                node._accumulate(g)
            if node._backward_fn is not None:
                for parent, pg in node._backward_fn(g):
                    if id(parent) in grads:
                        grads[id(parent)] += pg
                    else:
                        grads[id(parent)] = pg
        # intermediate tensors explicitly marked requires_grad also collect
        # gradients during the sweep above via their own entries
        return None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # operator sugar used throughout the model code
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    needs = _grad_enabled and any(p.requires_grad or p._backward_fn is not None for p in parents)
    out.requires_grad = False
    out._parents = tuple(parents) if needs else ()
    out._backward_fn = backward_fn if needs else None
    out._op = op
    return out


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(op, a.shape, b.shape)


# ---------------------------------------------------------------------------
# elementary ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape("add", a, b)

    def bw(g):
        return ((a, g), (b, g))

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape("sub", a, b)

    def bw(g):
        return ((a, g), (b, -g))

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape("mul", a, b)

    def bw(g):
        return ((a, g * b.data), (b, g * a.data))

    return _make(a.data * b.data, (a, b), bw, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)

    def bw(g):
        return ((a, g * s),)

    return _make(a.data * s, (a,), bw, "scale")


def add_bias(a: Tensor, b: Tensor) -> Tensor:
    """Add b to every leading slice of a; b.shape must equal a trailing
    suffix of a.shape (e.g. per-channel bias or a positional table)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.ndim > a.ndim or a.shape[a.ndim - b.ndim:] != b.shape:
        raise ShapeMismatchError("add_bias", a.shape, b.shape)
    lead = a.ndim - b.ndim

    def bw(g):
        gb = g.sum(axis=tuple(range(lead))) if lead else g
        return ((a, g), (b, gb))

    return _make(a.data + b.data, (a, b), bw, "add_bias")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Supports 2D @ 2D, nD @ 2D, and nD @ nD with equal
    leading (batch) dimensions."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    out = a.data @ b.data

    if b.ndim == 2:
        def bw(g):
            ga = g @ b.data.T
            k = a.shape[-1]
            n = b.shape[-1]
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            return ((a, ga), (b, gb))
    else:
        def bw(g):
            ga = g @ np.swapaxes(b.data, -1, -2)
            gb = np.swapaxes(a.data, -1, -2) @ g
            return ((a, ga), (b, gb))

    return _make(out, (a, b), bw, "matmul")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: output shape = ids.shape + (d,)."""
    table = _as_tensor(table)
    if table.ndim != 2:
        raise ShapeMismatchError("embedding", table.shape, np.shape(ids))
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return ((table, gt),)

    return _make(out, (table,), bw, "embedding")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalization over the last axis, then affine per-channel transform."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatchError("layer_norm", x.shape, gain.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        gbias = g.reshape(-1, d).sum(axis=0)
        gy = g * gain.data
        m1 = gy.mean(axis=-1, keepdims=True)
        m2 = (gy * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gy - m1 - xhat * m2)
        return ((x, gx), (gain, ggain), (bias, gbias))

    return _make(out, (x, gain, bias), bw, "layer_norm")


def _softmax_np(z: np.ndarray, axis: int) -> np.ndarray:
    zmax = z.max(axis=axis, keepdims=True)
    e = np.exp(z - zmax)
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax_np(z: np.ndarray, axis: int) -> np.ndarray:
    zmax = z.max(axis=axis, keepdims=True)
    zs = z - zmax
    return zs - np.log(np.exp(zs).sum(axis=axis, keepdims=True))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    y = _softmax_np(x.data, axis)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((x, (g - dot) * y),)

    return _make(y, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    y = _log_softmax_np(x.data, axis)

    def bw(g):
        sm = np.exp(y)
        return ((x, g - sm * g.sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw, "log_softmax")


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where mask is True with `value` (no gradient there)."""
    x = _as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeMismatchError("masked_fill", x.shape, mask.shape)
    out = np.where(mask, value, x.data)

    def bw(g):
        return ((x, np.where(mask, 0.0, g)),)

    return _make(out, (x,), bw, "masked_fill")


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(t) for t in tensors]
    ref = parts[0].shape
    for t in parts[1:]:
        if len(t.shape) != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)
        ):
            raise ShapeMismatchError("concat", ref, t.shape)
    out = np.concatenate([t.data for t in parts], axis=axis)
    sizes = [t.shape[axis] for t in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        grads = []
        for t, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            grads.append((t, g[tuple(idx)]))
        return tuple(grads)

    return _make(out, parts, bw, "concat")


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of the entries of x selected by a same-shape boolean mask."""
    x = _as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeMismatchError("masked_mean", x.shape, mask.shape)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("masked_mean: mask selects no positions")
    out = np.asarray(x.data[mask].sum() / n)

    def bw(g):
        gx = np.where(mask, float(g) / n, 0.0).astype(x.data.dtype)
        return ((x, gx),)

    return _make(out, (x,), bw, "masked_mean")


def gelu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    inv_sqrt2 = 0.7071067811865476
    cdf = 0.5 * (1.0 + erf(x.data * inv_sqrt2))
    out = x.data * cdf

    def bw(g):
        pdf = np.exp(-0.5 * x.data * x.data) * 0.3989422804014327
        return ((x, g * (cdf + x.data * pdf)),)

    return _make(out, (x,), bw, "gelu")


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)

    def bw(g):
        return ((x, g * (1.0 - y * y)),)

    return _make(y, (x,), bw, "tanh")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    out = x.data.reshape(shape)
    old = x.shape

    def bw(g):
        return ((x, g.reshape(old)),)

    return _make(out, (x,), bw, "reshape")


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    out = np.transpose(x.data, axes)
    inv = np.argsort(axes)

    def bw(g):
        return ((x, np.transpose(g, inv)),)

    return _make(out, (x,), bw, "transpose")


def tensor_sum(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.asarray(x.data.sum())

    def bw(g):
        return ((x, np.full_like(x.data, float(g))),)

    return _make(out, (x,), bw, "sum")


def detach(x: Tensor) -> Tensor:
    return _as_tensor(x).detach()


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _flatten_logits(logits: Tensor, targets, mask):
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    m = np.asarray(mask, dtype=bool).reshape(-1)
    if flat.shape[0] != t.shape[0] or flat.shape[0] != m.shape[0]:
        raise ShapeMismatchError("loss", logits.shape, np.shape(mask))
    return flat, t, m, v


def cross_entropy(logits: Tensor, targets, mask) -> Tensor:
    """Mean over masked positions of -log softmax(logits)[target].

    `logits` is [P, V] (or any leading shape flattening to P rows);
    `targets` holds token ids and `mask` selects the positions that count.
    """
    logits = _as_tensor(logits)
    flat, t, m, v = _flatten_logits(logits, targets, mask)
    if v < 2:
        raise ValueError(f"cross_entropy: vocabulary size must be >= 2, got {v}")
    n = int(m.sum())
    if n == 0:
        raise ValueError("cross_entropy: mask selects no positions")
    logp = _log_softmax_np(flat[m], 1)
    rows = np.arange(n)
    out = np.asarray(-logp[rows, t[m]].mean())

    def bw(g):
        gl = np.zeros_like(flat)
        p = np.exp(logp)
        p[rows, t[m]] -= 1.0
        gl[m] = p * (float(g) / n)
        return ((logits, gl.reshape(logits.shape)),)

    return _make(out, (logits,), bw, "cross_entropy")


def kl_divergence(p_logits: Tensor, q_logits: Tensor, mask, temperature: float = 1.0) -> Tensor:
    """Mean over masked positions of KL(softmax(p/tau) || softmax(q/tau)),
    rescaled by tau^2.

    The p side is treated as a constant (teacher): gradient flows only to
    q_logits. Probabilities are clamped to PROB_FLOOR before the log so a
    hard one-hot teacher row stays finite.
    """
    p_logits, q_logits = _as_tensor(p_logits), _as_tensor(q_logits)
    if p_logits.shape != q_logits.shape:
        raise ShapeMismatchError("kl_divergence", p_logits.shape, q_logits.shape)
    tau = float(temperature)
    if tau <= 0:
        raise ValueError(f"kl_divergence: temperature must be positive, got {tau}")
    v = q_logits.shape[-1]
    pf = p_logits.data.reshape(-1, v)
    qf = q_logits.data.reshape(-1, v)
    m = np.asarray(mask, dtype=bool).reshape(-1)
    if m.shape[0] != pf.shape[0]:
        raise ShapeMismatchError("kl_divergence", p_logits.shape, np.shape(mask))
    n = int(m.sum())
    if n == 0:
        raise ValueError("kl_divergence: mask selects no positions")
    p = _softmax_np(pf[m] / tau, 1)
    q = _softmax_np(qf[m] / tau, 1)
    pc = np.maximum(p, PROB_FLOOR)
    qc = np.maximum(q, PROB_FLOOR)
    per_row = (p * (np.log(pc) - np.log(qc))).sum(axis=1)
    out = np.asarray(per_row.mean() * tau * tau)

    def bw(g):
        gq = np.zeros_like(qf)
        gq[m] = (q - p) * (float(g) * tau / n)
        return ((q_logits, gq.reshape(q_logits.shape)),)

    return _make(out, (q_logits,), bw, "kl_divergence")


# ---------------------------------------------------------------------------
# finite-difference gradient checker
# ---------------------------------------------------------------------------

def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: int = 64,
    seed: int = 0,
) -> float:
    """Compare analytic gradients against central finite differences.

    `loss_fn` is a zero-argument callable that rebuilds the loss from the
    current values of `params`. Samples at most `max_coords` coordinates per
    parameter tensor with a seeded RNG and returns the max relative error
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    rng = np.random.default_rng(seed)
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    worst = 0.0
    for p, ag in zip(params, analytic):
        size = p.data.size
        k = min(max_coords, size)
        coords = rng.choice(size, size=k, replace=False)
        flat = p.data.reshape(-1)
        agf = ag.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            hi = float(loss_fn().data)
            flat[c] = orig - eps
            lo = float(loss_fn().data)
            flat[c] = orig
            numeric = (hi - lo) / (2 * eps)
            a = float(agf[c])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
