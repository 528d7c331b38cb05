"""Dense f64 tensors with reverse-mode autodiff and a finite-difference checker.

Every op returns a new :class:`Tensor`. When at least one input requires a
gradient the output keeps references to its parents plus a closure that
pushes the upstream gradient back; :meth:`Tensor.backward` walks that graph in
reverse topological order. Tensors that do not require gradients never get a
``grad`` buffer.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

MASK_VALUE = -1e9


class DimensionError(ValueError):
    pass


class NumericsError(ArithmeticError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if not self.requires_grad:
            raise NumericsError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise NumericsError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf: accumulate
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_lift(other), -1.0))

    def __rsub__(self, other):
        return add(_lift(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __getitem__(self, idx):
        return slice_(self, idx)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological_order(root: Tensor) -> list[Tensor]:
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


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from exc
    sa, sb = a.shape, b.shape
    return _make(data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from exc
    ad, bd = a.data, b.data
    return _make(
        data,
        (a, b),
        lambda g: (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        ),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    A 1-D ``b`` is not accepted: reshape vectors to ``k×1`` first.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    flat = bd.ndim == 2 and ad.ndim > 2
    if flat:
        # one GEMM instead of a stack of small ones
        data = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],))
    else:
        data = np.matmul(ad, bd)

    def backward(g):
        ga = gb = None
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ bd.T).reshape(ad.shape)
            if b.requires_grad:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _make(data, (a, b), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def expand(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Broadcast ``a`` to ``shape`` (numpy rules); the gradient sums back."""
    src = a.shape
    try:
        data = np.broadcast_to(a.data, tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"expand: cannot broadcast {src} to {tuple(shape)}") from exc
    return _make(data, (a,), lambda g: (_unbroadcast(g, src),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat: no inputs")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat along axis {axis}: incompatible shapes {shapes}") from exc
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(data, tensors, backward)


def slice_(a: Tensor, idx) -> Tensor:
    src = a.shape
    data = a.data[idx]

    def backward(g):
        full = np.zeros(src)
        full[idx] = g
        return (full,)

    return _make(np.array(data, copy=True), (a,), backward)


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table by integer ids of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"take_rows: table must be 2-D, got {table.shape}")
    src = table.shape

    def backward(g):
        full = np.zeros(src)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, src[1]))
        return (full,)

    return _make(table.data[ids], (table,), backward)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * x2 * x))

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(0.5 * x * (1.0 + t), (a,), backward)


def softmax_lastdim(x: Tensor, mask: np.ndarray | Tensor | None = None) -> Tensor:
    """Softmax over the last axis with an optional additive mask.

    ``mask`` broadcasts against ``x``; masked entries carry ``MASK_VALUE``.
    A row where every entry is masked is rejected.
    """
    logits = x.data
    if mask is not None:
        m = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
        try:
            logits = logits + m
        except ValueError as exc:
            raise DimensionError(f"softmax mask {m.shape} does not broadcast to {x.shape}") from exc
        if np.any(np.all(np.broadcast_to(m, logits.shape) <= MASK_VALUE / 2, axis=-1)):
            raise NumericsError("softmax: a row has every position masked")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return ((g - (g * y).sum(axis=-1, keepdims=True)) * y,)

    return _make(y, (x,), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for ``x`` of shape (..., k) and a 2-D ``w``; one graph node."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} vs weight {w.shape}")
    xd, wd = x.data, w.data
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd
    if b is not None:
        out += b.data
    out = out.reshape(xd.shape[:-1] + (wd.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward)


def attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    heads: int,
    mask: np.ndarray | None = None,
    k_prefix: Tensor | None = None,
    v_prefix: Tensor | None = None,
) -> Tensor:
    """Multi-head scaled dot-product attention as one graph node.

    ``q`` is (B, S, D); ``k`` and ``v`` are (B, T, D). Optional ``k_prefix`` and
    ``v_prefix`` are (P, D) rows shared by every batch element and placed in
    front of the keys/values. ``mask`` is additive over the P + T key axis and
    broadcasts to (B, heads, S, P + T). Returns per-head outputs
    (B, heads, S, D/heads); numerically the composed
    reshape/matmul/softmax_lastdim path.
    """
    bsz, s, d = q.shape
    t = k.shape[1]
    if k.shape != (bsz, t, d) or v.shape != (bsz, t, d):
        raise DimensionError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    if d % heads:
        raise DimensionError(f"attention: {heads} heads do not divide width {d}")
    n_pre = 0 if k_prefix is None else k_prefix.shape[0]
    if (v_prefix is None) != (k_prefix is None) or (
        k_prefix is not None and (k_prefix.shape != (n_pre, d) or v_prefix.shape != (n_pre, d))
    ):
        raise DimensionError("attention: key/value prefixes must both be (P, D)")
    dk = d // heads
    c = 1.0 / math.sqrt(dk)
    qh = q.data.reshape(bsz, s, heads, dk).transpose(0, 2, 1, 3)
    kh = k.data.reshape(bsz, t, heads, dk).transpose(0, 2, 1, 3)
    vh = v.data.reshape(bsz, t, heads, dk).transpose(0, 2, 1, 3)
    scores = np.matmul(qh, kh.transpose(0, 1, 3, 2))
    if n_pre:
        kp = k_prefix.data.reshape(n_pre, heads, dk).transpose(1, 2, 0)  # (h, dk, P)
        vp = v_prefix.data.reshape(n_pre, heads, dk).transpose(1, 0, 2)  # (h, P, dk)
        scores = np.concatenate([np.matmul(qh, kp), scores], axis=-1)
    scores *= c
    if mask is not None:
        scores = scores + mask
        if np.any(np.all(np.broadcast_to(mask, scores.shape) <= MASK_VALUE / 2, axis=-1)):
            raise NumericsError("attention: a query has every key masked")
    scores -= scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    out = np.matmul(p[..., n_pre:], vh)
    if n_pre:
        out += np.matmul(p[..., :n_pre], vp)

    def backward(g):
        gp = np.matmul(g, vh.transpose(0, 1, 3, 2))
        if n_pre:
            gp = np.concatenate([np.matmul(g, vp.transpose(0, 2, 1)), gp], axis=-1)
        gs = (gp - (gp * p).sum(axis=-1, keepdims=True)) * p * c
        gs_pre, gs_tok = gs[..., :n_pre], gs[..., n_pre:]
        grads = [None, None, None]
        if q.requires_grad:
            gq = np.matmul(gs_tok, kh)
            if n_pre:
                gq += np.matmul(gs_pre, kp.transpose(0, 2, 1))
            grads[0] = gq.transpose(0, 2, 1, 3).reshape(bsz, s, d)
        if k.requires_grad:
            grads[1] = np.matmul(gs_tok.transpose(0, 1, 3, 2), qh).transpose(0, 2, 1, 3).reshape(bsz, t, d)
        if v.requires_grad:
            grads[2] = np.matmul(p[..., n_pre:].transpose(0, 1, 3, 2), g).transpose(0, 2, 1, 3).reshape(bsz, t, d)
        if n_pre:
            if k_prefix.requires_grad:
                # (B,h,S,P) x (B,h,S,dk) summed over batch and queries -> (h,P,dk)
                gkp = np.einsum("bhsp,bhsd->hpd", gs_pre, qh)
                grads.append(gkp.transpose(1, 0, 2).reshape(n_pre, d))
            else:
                grads.append(None)
            if v_prefix.requires_grad:
                gvp = np.einsum("bhsp,bhsd->hpd", p[..., :n_pre], g)
                grads.append(gvp.transpose(1, 0, 2).reshape(n_pre, d))
            else:
                grads.append(None)
        return tuple(grads)

    parents = (q, k, v) if not n_pre else (q, k, v, k_prefix, v_prefix)
    return _make(out, parents, backward)


def log_softmax_lastdim(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: last axis {d} vs gamma {gamma.shape} / beta {beta.shape}"
        )
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def backward(g):
        gx = gg = gb = None
        if x.requires_grad:
            gxhat = g * gd
            gx = inv * (
                gxhat
                - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb

    return _make(out, (x, gamma, beta), backward)


@dataclass(frozen=True)
class DropoutMask:
    """Inverted-dropout multiplier; replaying it makes dropout a fixed function."""

    keep: np.ndarray
    rate: float

    @classmethod
    def sample(cls, shape, rate: float, rng: np.random.Generator) -> "DropoutMask":
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        keep = (rng.random(shape) >= rate).astype(np.float64) / (1.0 - rate)
        return cls(keep=keep, rate=rate)


def dropout(
    x: Tensor,
    rate: float,
    rng: np.random.Generator | None = None,
    train: bool = True,
    mask: DropoutMask | None = None,
) -> Tensor:
    if not train or rate == 0.0:
        return x
    if mask is None:
        if rng is None:
            raise ValueError("dropout in train mode needs an rng or a fixed mask")
        mask = DropoutMask.sample(x.shape, rate, rng)
    if mask.keep.shape != x.shape:
        raise DimensionError(f"dropout mask {mask.keep.shape} vs input {x.shape}")
    keep = mask.keep
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


def l2_norm_squared(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.sum(ad * ad), (a,), lambda g: (2.0 * g * ad,))


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of the flattened tensors; 0 when either side is all zero."""
    if a.data.size != b.data.size:
        raise DimensionError(f"cosine_similarity: sizes {a.shape} and {b.shape} differ")
    av, bv = a.data.reshape(-1), b.data.reshape(-1)
    na, nb = float(np.sqrt(av @ av)), float(np.sqrt(bv @ bv))
    if na == 0.0 or nb == 0.0:
        return _make(np.zeros(()), (a, b), lambda g: (np.zeros(a.shape), np.zeros(b.shape)))
    dot = float(av @ bv)
    c = dot / (na * nb)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = (g * (bv / (na * nb) - c * av / (na * na))).reshape(a.shape)
        if b.requires_grad:
            gb = (g * (av / (na * nb) - c * bv / (nb * nb))).reshape(b.shape)
        return ga, gb

    return _make(np.asarray(c), (a, b), backward)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Plain-array cosine similarity with the same zero convention."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by the larger of the two gradients' max magnitude."""
    scale_ = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)))
    diff = float(np.max(np.abs(analytic - numeric), initial=0.0))
    if scale_ == 0.0:
        return diff
    return diff / scale_


def numerical_gradient(f: Callable[[], Tensor], param: Tensor, step: float = 1e-5) -> np.ndarray:
    flat = param.data.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = _scalar(f())
        flat[i] = orig - step
        fm = _scalar(f())
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * step)
    return out.reshape(param.shape)


def _scalar(t: Tensor) -> float:
    v = float(np.asarray(t.data).reshape(-1)[0]) if t.data.size == 1 else float("nan")
    if not math.isfinite(v):
        raise NumericsError(f"grad_check: objective is not a finite scalar (got shape {t.shape}, value {v})")
    return v


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` takes no arguments and must read ``params`` (whose ``data`` arrays are
    perturbed in place); it has to be deterministic, so any dropout inside it
    must replay a fixed mask or reseed its rng on every call.
    """
    for p in params.values():
        p.requires_grad = True
        p.grad = None
    out = f()
    _scalar(out)
    out.backward()
    errors = {}
    for name, p in params.items():
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.copy()
        numeric = numerical_gradient(f, p, step)
        errors[name] = relative_error(analytic, numeric)
    return GradCheckReport(errors=errors, tolerance=tolerance)
