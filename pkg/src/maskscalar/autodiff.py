"""Small define-by-run reverse-mode autodiff over float64 numpy arrays.

Only the operations the masking frontend needs are provided. Every op works
on arrays with arbitrary leading dimensions; time is the second-to-last axis
and features the last axis wherever that matters (conv, attention, norms).
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

LOG_CLAMP = 1e-12

_GRAD_ENABLED = True
# set only while grad_check evaluates a function (see _Tape)
_TAPE = None


class DomainError(ValueError):
    """Raised when an op receives inputs outside its mathematical domain."""


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording the graph."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class _Tape:
    """What grad_check needs from one base evaluation of a function.

    Recording stores every stop_gradient output and the branch taken by every
    non-smooth op. Replaying feeds the stored stop_gradient values back (held
    constant) and flags evaluations whose branches differ from the base, i.e.
    whose perturbation crossed a kink.
    """

    def __init__(self):
        self.stops: list[np.ndarray] = []
        self.branches: list[np.ndarray] = []
        self.replay = False
        self.flags: np.ndarray | None = None
        self._s = 0
        self._b = 0

    def replayer(self) -> "_Tape":
        t = _Tape()
        t.stops, t.branches, t.replay = self.stops, self.branches, True
        return t

    def stop(self, data: np.ndarray) -> np.ndarray:
        if not self.replay:
            self.stops.append(data.copy())
            return data
        ref = self.stops[self._s]
        self._s += 1
        return np.broadcast_to(ref, data.shape)

    def branch(self, state: np.ndarray) -> None:
        if not self.replay:
            self.branches.append(state.copy())
            return
        ref = self.branches[self._b]
        self._b += 1
        diff = state != ref
        if diff.ndim > ref.ndim:  # leading axis holds perturbed copies
            per = diff.reshape(diff.shape[0], -1).any(axis=1)
        else:
            per = np.array([diff.any()])
        self.flags = per if self.flags is None else self.flags | per


@contextlib.contextmanager
def _using(tape: _Tape):
    global _TAPE
    prev = _TAPE
    _TAPE = tape
    try:
        yield tape
    finally:
        _TAPE = prev


class Tensor:
    """A value node: data, optional gradient, and the op that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "name")
    __array_ufunc__ = None  # make numpy defer to our operators

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    def backward(self):
        backward(self)

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
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
    return grad.reshape(shape)


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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Reverse-accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaf gradients are overwritten, not accumulated across calls.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            pg = _unbroadcast(pg, p.shape)
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _node(out, (a, b), lambda g: (g / b.data, -g * out / b.data), "div")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if b.data.ndim > 1 else np.multiply.outer(g, b.data)
        gb = np.swapaxes(a.data, -1, -2) @ g if a.data.ndim > 1 else np.multiply.outer(a.data, g)
        return ga, gb

    return _node(a.data @ b.data, (a, b), bw, "matmul")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log of a non-positive value")
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign so neither branch overflows
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _node(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def elementwise_pow(base, exponent) -> Tensor:
    """``base ** exponent`` with gradients for both arguments.

    The base must be strictly positive; a zero or negative base almost always
    means a sigmoid is missing upstream.
    """
    base, exponent = as_tensor(base), as_tensor(exponent)
    if np.any(base.data <= 0):
        raise DomainError("elementwise_pow needs a strictly positive base")
    out = np.power(base.data, exponent.data)

    def bw(g):
        g_base = g * exponent.data * np.power(base.data, exponent.data - 1.0)
        g_exp = g * out * np.log(np.maximum(base.data, LOG_CLAMP))
        return g_base, g_exp

    return _node(out, (base, exponent), bw, "pow")


def floor_max(x, beta: float) -> Tensor:
    """``max(x, beta)``; the gradient is 0 where ``x <= beta``."""
    x = as_tensor(x)
    keep = x.data > beta
    if _TAPE is not None:
        _TAPE.branch(keep)
    out = np.where(keep, x.data, beta)
    return _node(out, (x,), lambda g: (g * keep,), "floor_max")


def stop_gradient(x) -> Tensor:
    """Forward identity that cuts the graph: nothing flows back through it."""
    x = as_tensor(x)
    data = x.data if _TAPE is None else _TAPE.stop(x.data)
    out = Tensor(data)
    out.op = "stop_gradient"
    return out


# ---------------------------------------------------------------- reductions


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _node(out, (x,), bw, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def l1_norm(x, axis=None) -> Tensor:
    """Entry-wise sum of absolute values (subgradient 0 at 0)."""
    x = as_tensor(x)
    if _TAPE is not None:
        _TAPE.branch(np.sign(x.data))
    out = np.abs(x.data).sum(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (g * np.sign(x.data),)

    return _node(out, (x,), bw, "l1")


def squared_l2(x, axis=None) -> Tensor:
    """Entry-wise sum of squares."""
    x = as_tensor(x)
    out = (x.data * x.data).sum(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (2.0 * g * x.data,)

    return _node(out, (x,), bw, "sq_l2")


# ---------------------------------------------------------------- shape ops


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(ts))
        )

    return _node(out, ts, bw, "concat")


def slice_(x, index) -> Tensor:
    x = as_tensor(x)
    out = x.data[index]

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(np.array(out), (x,), bw, "slice")


def swapaxes(x, a: int, b: int) -> Tensor:
    x = as_tensor(x)
    return _node(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),), "swapaxes")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


# ---------------------------------------------------------------- fused layers


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        n = x.shape[-1]
        gx_hat = g * gain.data
        gx = inv / n * (
            n * gx_hat
            - gx_hat.sum(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True)
        )
        return gx, g * xhat, g

    return _node(out, (x, gain, bias), bw, "layer_norm")


def causal_depthwise_conv(x, kernel, bias) -> Tensor:
    """Per-channel causal conv over time (axis -2).

    ``out[t, d] = bias[d] + sum_j kernel[j, d] * x[t - j, d]`` with zeros
    before the first frame, so frame t never sees frames after t.
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    k = kernel.shape[-2]
    n_t = x.shape[-2]
    pad = [(0, 0)] * (x.data.ndim - 2) + [(k - 1, 0), (0, 0)]
    xp = np.pad(x.data, pad)
    out = bias.data
    for j in range(k):
        out = out + kernel.data[..., j, None, :] * xp[..., k - 1 - j : k - 1 - j + n_t, :]

    def bw(g):
        gxp = np.zeros_like(xp)
        gk = np.empty_like(kernel.data)
        lead = tuple(range(g.ndim - 1))
        for j in range(k):
            sl = (Ellipsis, slice(k - 1 - j, k - 1 - j + n_t), slice(None))
            gxp[sl] += g * kernel.data[j]
            gk[j] = (g * xp[sl]).sum(axis=lead)
        return gxp[..., k - 1 :, :], gk, g

    return _node(out, (x, kernel, bias), bw, "causal_conv")


def masked_softmax(scores, additive_mask: np.ndarray) -> Tensor:
    """Softmax over the last axis of ``scores + additive_mask``.

    Masked positions carry ``-inf`` in the mask and get exactly zero weight.
    Every row must keep at least one unmasked position.
    """
    scores = as_tensor(scores)
    z = scores.data + additive_mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (scores,), bw, "masked_softmax")


def causal_band_mask(n_frames: int, left_context: int) -> np.ndarray:
    """Additive attention mask allowing frame t to see frames [t - left_context, t]."""
    t = np.arange(n_frames)
    lag = t[:, None] - t[None, :]
    allowed = (lag >= 0) & (lag <= left_context)
    return np.where(allowed, 0.0, -np.inf)


# ---------------------------------------------------------------- gradient check


# symmetric central stencils: offsets k (in units of h) and the weight of
# f(x + k h) - f(x - k h); the derivative is sum(w_k * diff_k) / h
_STENCILS = {
    2: (np.array([1.0]), np.array([0.5])),
    4: (np.array([1.0, 2.0]), np.array([8.0, -1.0]) / 12.0),
}


@dataclass
class GradReport:
    max_rel_error: float
    worst_param: str
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float
    n_checked: int
    n_skipped: int = 0  # elements whose every step size crossed a kink

    @property
    def ok(self) -> bool:
        return math.isfinite(self.max_rel_error)

    def to_dict(self) -> dict:
        return {
            "max_rel_error": self.max_rel_error,
            "worst_param": self.worst_param,
            "worst_index": list(self.worst_index),
            "analytic": self.analytic,
            "numeric": self.numeric,
            "n_checked": self.n_checked,
            "n_skipped": self.n_skipped,
        }


def grad_check(
    fn: Callable[..., Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    analytic: Mapping[str, np.ndarray] | None = None,
    max_per_param: int | None = None,
    seed: int = 0,
    probes: int = 0,
    order: int = 2,
    record: list | None = None,
    kink_retries: int = 3,
) -> GradReport:
    """Compare backprop gradients against central differences.

    Every element is checked unless ``max_per_param`` is set, in which case
    each parameter contributes a seeded sample of at most that many elements.

    ``fn()`` rebuilds the loss from the current parameter data. It may
    return the loss as a scalar or as an array of terms whose sum is the
    loss; terms are differenced one by one before summing, which keeps the
    rounding noise of a large total out of small differences.
    ``analytic`` overrides the backprop gradients (used to self-test the
    checker with a planted fault).

    With ``probes > 0`` the numeric passes are vectorised: the parameter being
    perturbed gets ``probes`` stacked copies along a new leading axis (then a
    singleton axis, then the parameter's own shape padded to 2-D), and
    ``fn(probes)`` must return one loss (or one row of terms) per copy. The
    plain ``fn()`` form is still used for the analytic pass.

    ``order`` selects the central stencil: 2 is the usual
    ``(f(x+h) - f(x-h)) / 2h``; 4 adds the points at ``x +- 2h`` and cancels
    the ``h**2`` truncation term, which matters for elements whose gradient
    is small next to the curvature.

    Values passing through ``stop_gradient`` are held at their unperturbed
    values in the numeric passes, so the reference is the derivative the
    backward pass is defined to compute. A stencil that moves any non-smooth
    op (floor, absolute value) onto another branch has crossed a kink; the
    element is retried with the step divided by 4, up to ``kink_retries``
    times, and counted in ``n_skipped`` if every step crosses.

    ``record``, if given, collects ``(param, index, analytic, numeric, rel)``
    for every checked element.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if order not in _STENCILS:
        raise ValueError(f"order must be one of {sorted(_STENCILS)}")
    offsets, weights = _STENCILS[order]
    width = 2 * len(offsets)
    if probes < 0 or probes % width:
        raise ValueError(f"probes must be a nonnegative multiple of {width}")

    base_tape = _Tape()
    with _using(base_tape):
        loss = fn()
    if loss.data.size != 1:
        loss = sum_(loss)
    if analytic is None:
        zero_grad(params.values())
        backward(loss)
        analytic = {
            name: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for name, p in params.items()
        }

    def combine(vals: np.ndarray, h: float) -> np.ndarray:
        # vals: (elements, width, terms) at +k1 h, -k1 h, +k2 h, -k2 h, ...
        diffs = vals[:, 0::2, :] - vals[:, 1::2, :]  # exact zero for untouched terms
        return np.einsum("k,ekt->et", weights, diffs).sum(axis=-1) / h

    def steps(h: float) -> np.ndarray:
        return np.repeat(offsets, 2) * np.tile([1.0, -1.0], len(offsets)) * h

    def evaluate(p: Tensor, idx: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
        """Numeric derivatives for elements ``idx`` and a per-element kink flag."""
        base = p.data
        tape = base_tape.replayer()
        deltas = steps(h)
        if probes:
            copies = width * len(idx)
            stacked = np.repeat(base.reshape(1, -1), copies, axis=0)
            for j, d in enumerate(deltas):
                stacked[np.arange(len(idx)) * width + j, idx] += d
            lead = (copies, 1) + (1,) * max(0, 2 - base.ndim)
            p.data = stacked.reshape(lead + base.shape)
            try:
                with _using(tape):
                    vals = np.asarray(fn(copies).data, dtype=np.float64)
            finally:
                p.data = base
            if vals.ndim == 0 or vals.shape[0] != copies:
                raise ValueError(f"probed fn must return a leading axis of {copies} copies, got {vals.shape}")
            flags = np.zeros(copies, dtype=bool) if tape.flags is None else np.broadcast_to(tape.flags, (copies,))
            return combine(vals.reshape(len(idx), width, -1), h), flags.reshape(len(idx), width).any(axis=1)
        nums, kinks = [], []
        flat = base.reshape(-1)
        for i in idx:
            orig = flat[i]
            rows, crossed = [], False
            for d in deltas:
                flat[i] = orig + d
                t = base_tape.replayer()
                with _using(t):
                    rows.append(np.asarray(fn().data, dtype=np.float64).reshape(-1))
                crossed |= bool(t.flags is not None and t.flags.any())
            flat[i] = orig
            nums.append(combine(np.array(rows)[None], h)[0])
            kinks.append(crossed)
        return np.array(nums), np.array(kinks)

    rng = np.random.default_rng(seed)
    worst = GradReport(0.0, "", (), 0.0, 0.0, 0)
    n = skipped = 0
    chunk = max(1, probes // width)
    with no_grad():
        for name, p in params.items():
            size = p.data.size
            a_flat = np.asarray(analytic[name]).reshape(-1)
            picks = np.arange(size)
            if max_per_param is not None and size > max_per_param:
                picks = np.sort(rng.choice(size, size=max_per_param, replace=False))
            for lo in range(0, len(picks), chunk):
                idx = picks[lo : lo + chunk]
                num, kink = evaluate(p, idx, eps)
                h = eps
                for _ in range(kink_retries):
                    if not kink.any():
                        break
                    h /= 4.0
                    redo = np.flatnonzero(kink)
                    num_r, kink_r = evaluate(p, idx[redo], h)
                    num[redo], kink[redo] = num_r, kink_r
                for i, nv, crossed in zip(idx, num, kink):
                    i, nv = int(i), float(nv)
                    if crossed:
                        skipped += 1
                        continue
                    ana = float(a_flat[i])
                    n += 1
                    if not (math.isfinite(nv) and math.isfinite(ana)):
                        loc = tuple(int(v) for v in np.unravel_index(i, p.shape))
                        return GradReport(math.inf, name, loc, ana, nv, n, skipped)
                    rel = abs(ana - nv) / max(abs(ana), abs(nv), 1e-12)
                    if record is not None:
                        record.append((name, i, ana, nv, rel))
                    if rel > worst.max_rel_error or not worst.worst_param:
                        loc = tuple(int(v) for v in np.unravel_index(i, p.shape))
                        worst = GradReport(rel, name, loc, ana, nv, n)
    worst.n_checked = n
    worst.n_skipped = skipped
    return worst
