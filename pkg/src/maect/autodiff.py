"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every primitive is a function ``op(*tensors) -> Tensor`` that computes its
forward value with numpy and, when a :class:`Tape` is active and some input
requires a gradient, appends a record holding a vector-Jacobian closure.
:func:`backward` replays a tape in reverse.

Heavy building blocks (layer norm, batch norm, attention, cross-entropy) are
single fused primitives so a ViT step records a few hundred nodes, not tens of
thousands.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

NORM_EPS = 1e-5
BN_MOMENTUM = 0.1

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "maect_active_tape", default=None
)


class AutodiffError(ValueError):
    """Raised on shape mismatches, non-finite values and misuse of tapes."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, _checked: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not _checked:
            _check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _raise_item(t: Tensor):
    raise AutodiffError(f"item() needs a single-element tensor, got shape {t.shape}")


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered log of primitive applications; use as a context manager."""

    records: list[Record] = field(default_factory=list)
    _token: object = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)


class no_record:
    """Suspend recording (the active tape is hidden inside the block)."""

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(None)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)


def _check_finite(arr: np.ndarray, op: str) -> None:
    # a sum propagates nan/inf; only fall back to the exact test when it trips
    if arr.size and not np.isfinite(arr.sum()):
        if not np.isfinite(arr).all():
            raise AutodiffError(f"{op}: non-finite values")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    _check_finite(data, op)
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs, _checked=True)
    if needs:
        tape = _ACTIVE_TAPE.get()
        if tape is not None:
            tape.records.append(Record(op, inputs, out, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, *shapes) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise AutodiffError(f"{op}: incompatible shapes {' and '.join(map(str, shapes))}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _result(
        "mul",
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(
        "div",
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise AutodiffError("log: non-positive input")
    ad = a.data
    return _result("log", np.log(ad), (a,), lambda g: (g / ad,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _result("abs", np.abs(a.data), (a,), lambda g: (g * sign,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a) -> Tensor:
    """Exact (erf) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def vjp(g):
        return (g * (cdf + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)),)

    return _result("gelu", x * cdf, (a,), vjp)


def detach(a) -> Tensor:
    """Stop-gradient: same values, never recorded."""
    a = as_tensor(a)
    return Tensor(a.data, requires_grad=False, _checked=True)


# ----------------------------------------------------------------- reductions


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result("sum", np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), vjp)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([shape[ax] for ax in axes]))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _result("mean", np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), vjp)


# ----------------------------------------------------------------- structure


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise AutodiffError(f"reshape: cannot reshape {src} into {shape}") from None
    return _result("reshape", out, (a,), lambda g: (g.reshape(src),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, type(Ellipsis), type(None))) for p in parts)


def getitem(a, idx) -> Tensor:
    """Slicing and integer-array gathering; gradients scatter-add back."""
    a = as_tensor(a)
    try:
        out = a.data[idx]
    except IndexError as err:
        raise AutodiffError(f"getitem: {err}") from None
    shape = a.shape
    basic = _is_basic_index(idx)

    def vjp(g):
        full = np.zeros(shape)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result("getitem", np.array(out, dtype=np.float64), (a,), vjp)


def gather_rows(a, index) -> Tensor:
    """``out[b, j] = a[b, index[b, j]]`` for a (B, N, ...) tensor and (B, K) ints."""
    a = as_tensor(a)
    index = np.asarray(index)
    if index.ndim != 2 or index.shape[0] != a.shape[0]:
        raise AutodiffError(f"gather_rows: index shape {index.shape} does not match {a.shape}")
    if index.size and (index.min() < 0 or index.max() >= a.shape[1]):
        raise AutodiffError("gather_rows: index out of range")
    rows = np.arange(a.shape[0])[:, None]
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, (rows, index), g)
        return (full,)

    return _result("gather_rows", a.data[rows, index], (a,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as err:
        raise AutodiffError(f"concat: {err}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result("concat", out, tensors, vjp)


# ------------------------------------------------------------ linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise AutodiffError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return (_unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape))

    return _result("matmul", ad @ bd, (a, b), vjp)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with weight shaped (in, out); x may carry leading axes."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise AutodiffError(f"linear: input {x.shape} does not match weight {weight.shape}")
    inputs = (x, weight)
    lead = x.shape[:-1]
    # one 2-D BLAS call instead of a batched matmul over the leading axes
    x2 = x.data.reshape(-1, x.shape[-1])
    out = (x2 @ weight.data).reshape(lead + (weight.shape[1],))
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise AutodiffError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data
        inputs = inputs + (bias,)
    wd = weight.data

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(lead + (wd.shape[0],))
        gw = x2.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _result("linear", out, inputs, vjp)


# ------------------------------------------------------------ normalizations


def layer_norm(x, weight=None, bias=None, eps: float = NORM_EPS) -> Tensor:
    """Normalize over the last axis, then optional elementwise affine."""
    x = as_tensor(x)
    d = x.shape[-1]
    inputs = [x]
    for name, p in (("weight", weight), ("bias", bias)):
        if p is not None:
            p = as_tensor(p)
            if p.shape != (d,):
                raise AutodiffError(f"layer_norm: {name} {p.shape} does not match last axis {d}")
            inputs.append(p)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat
    wd = None
    if weight is not None:
        wd = as_tensor(weight).data
        out = out * wd
    if bias is not None:
        out = out + as_tensor(bias).data

    def vjp(g):
        dxhat = g * wd if wd is not None else g
        gx = rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        grads = [gx]
        g2 = g.reshape(-1, d)
        if weight is not None:
            grads.append((g2 * xhat.reshape(-1, d)).sum(axis=0))
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _result("layer_norm", out, tuple(inputs), vjp)


@dataclass
class BatchNormState:
    """Running statistics of one BatchNorm layer (not trainable)."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def create(cls, dim: int) -> "BatchNormState":
        return cls(np.zeros(dim), np.ones(dim))


def batch_norm(
    x,
    weight=None,
    bias=None,
    state: BatchNormState | None = None,
    training: bool = True,
    momentum: float = BN_MOMENTUM,
    eps: float = NORM_EPS,
) -> Tensor:
    """BatchNorm over axis 0 of an (N, C) tensor.

    Training mode normalizes with the biased batch variance and, if a state is
    given, folds the batch mean and unbiased variance into the running
    statistics. Eval mode uses the running statistics.
    """
    x = as_tensor(x)
    if x.ndim != 2:
        raise AutodiffError(f"batch_norm: expected (N, C) input, got {x.shape}")
    n, c = x.shape
    inputs = [x]
    for name, p in (("weight", weight), ("bias", bias)):
        if p is not None:
            p = as_tensor(p)
            if p.shape != (c,):
                raise AutodiffError(f"batch_norm: {name} {p.shape} does not match channels {c}")
            inputs.append(p)
    wd = as_tensor(weight).data if weight is not None else None

    if training:
        if n < 2:
            raise AutodiffError("batch_norm: training mode needs at least 2 samples")
        mu = x.data.mean(axis=0)
        xc = x.data - mu
        var = (xc * xc).mean(axis=0)
        if state is not None:
            state.mean = (1 - momentum) * state.mean + momentum * mu
            state.var = (1 - momentum) * state.var + momentum * var * n / (n - 1)
        rstd = 1.0 / np.sqrt(var + eps)
        xhat = xc * rstd
    else:
        if state is None:
            raise AutodiffError("batch_norm: eval mode needs running statistics")
        rstd = 1.0 / np.sqrt(state.var + eps)
        xhat = (x.data - state.mean) * rstd

    out = xhat * wd if wd is not None else xhat
    if bias is not None:
        out = out + as_tensor(bias).data

    def vjp(g):
        dxhat = g * wd if wd is not None else g
        if training:
            gx = rstd * (dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0))
        else:
            gx = dxhat * rstd
        grads = [gx]
        if weight is not None:
            grads.append((g * xhat).sum(axis=0))
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _result("batch_norm", out, tuple(inputs), vjp)


def l2_normalize(x, eps: float = 1e-12) -> Tensor:
    """Scale each vector along the last axis to unit Euclidean length."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    norm = np.maximum(norm, eps)
    out = x.data / norm

    def vjp(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norm,)

    return _result("l2_normalize", out, (x,), vjp)


# ------------------------------------------------------------------ softmax


def _softmax(z: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    out = _softmax(x.data, axis)
    return _result(
        "softmax", out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    )


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    return _result(
        "log_softmax", out, (x,), lambda g: (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)
    )


def attention(q, k, v, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention on (B, T, D) query/key/value."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if not (q.shape == k.shape == v.shape) or q.ndim != 3:
        raise AutodiffError(f"attention: shapes {q.shape}, {k.shape}, {v.shape} must be equal (B, T, D)")
    b, t, d = q.shape
    if d % heads:
        raise AutodiffError(f"attention: dim {d} not divisible by {heads} heads")
    dh = d // heads
    scale = 1.0 / np.sqrt(dh)

    def split(a):
        return a.reshape(b, t, heads, dh).transpose(0, 2, 1, 3)

    def merge(a):
        return a.transpose(0, 2, 1, 3).reshape(b, t, d)

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    attn = _softmax((qh @ kh.transpose(0, 1, 3, 2)) * scale, -1)
    out = merge(attn @ vh)

    def vjp(g):
        gh = split(g)
        gv = attn.transpose(0, 1, 3, 2) @ gh
        ga = gh @ vh.transpose(0, 1, 3, 2)
        gs = attn * (ga - (ga * attn).sum(axis=-1, keepdims=True)) * scale
        gq = gs @ kh
        gk = gs.transpose(0, 1, 3, 2) @ qh
        return merge(gq), merge(gk), merge(gv)

    return _result("attention", out, (q, k, v), vjp)


# -------------------------------------------------------------------- losses


def cross_entropy(logits, targets) -> Tensor:
    """Mean softmax cross-entropy of (N, C) logits against integer targets."""
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise AutodiffError(
            f"cross_entropy: logits {logits.shape} do not match targets {targets.shape}"
        )
    n, c = logits.shape
    if n and (targets.min() < 0 or targets.max() >= c):
        raise AutodiffError("cross_entropy: target class out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(lse - z[rows, targets])

    def vjp(g):
        p = np.exp(z - lse[:, None])
        p[rows, targets] -= 1.0
        return (p * (g / n),)

    return _result("cross_entropy", np.asarray(loss), (logits,), vjp)


def mse_loss(pred, target) -> Tensor:
    """Mean over all elements of ``(pred - target)**2``."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise AutodiffError(f"mse_loss: shapes {pred.shape} and {target.shape} differ")
    diff = pred.data - target.data
    scale = 2.0 / max(diff.size, 1)
    return _result(
        "mse_loss",
        np.asarray((diff * diff).mean()),
        (pred, target),
        lambda g: (g * scale * diff, -g * scale * diff),
    )


# ------------------------------------------------------------------ backward


def backward(
    tape: Tape,
    seed=None,
    output: Tensor | None = None,
    inputs: Sequence[Tensor] | None = None,
):
    """Propagate ``seed`` from ``output`` (default: last record) to every leaf.

    Leaf gradients are accumulated into ``tensor.grad``. When ``inputs`` is
    given, their gradients are also returned as a list (zeros when unused).
    """
    if not tape.records:
        raise AutodiffError("backward: empty tape")
    if output is None:
        output = tape.records[-1].output
    if seed is None:
        if output.size != 1:
            raise AutodiffError(f"backward: seed required for non-scalar output {output.shape}")
        seed = np.ones(output.shape)
    seed = np.asarray(seed.data if isinstance(seed, Tensor) else seed, dtype=np.float64)
    if seed.shape != output.shape:
        raise AutodiffError(f"backward: seed shape {seed.shape} != output shape {output.shape}")

    produced = {id(r.output) for r in tape.records}
    grads: dict[int, np.ndarray] = {id(output): seed}
    owners: dict[int, Tensor] = {id(output): output}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                owners[key] = t

    for key, g in grads.items():
        t = owners[key]
        if key in produced and t is not output:
            continue
        t.grad = g.copy() if t.grad is None else t.grad + g

    if inputs is None:
        return None
    return [
        grads[id(t)] if id(t) in grads else np.zeros(t.shape)
        for t in inputs
    ]


def finite_difference_grad(f: Callable[[np.ndarray], float], x, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array."""
    if eps <= 0:
        raise AutodiffError("finite_difference_grad: eps must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    flat = base.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(base.copy()))
        flat[i] = orig - eps
        fm = float(f(base.copy()))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise AutodiffError(f"finite_difference_grad: non-finite value at coordinate {i}")
        out[i] = (fp - fm) / (2 * eps)
    return out.reshape(base.shape)


def grad_of(f: Callable[..., Tensor], *arrays) -> list[np.ndarray]:
    """Gradients of scalar ``f(*tensors)`` w.r.t. each array argument."""
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = f(*leaves)
    if not tape.records:
        return [np.zeros(t.shape) for t in leaves]
    return backward(tape, output=out, inputs=leaves)
