"""Reverse-mode differentiation over numpy arrays.

Ops record onto an explicit tape; the recording order is already a
topological order, so ``backward`` is a single reverse walk with
deterministic gradient accumulation.  Ops also work with no tape
active, in which case they just compute values (used for inference and
for the finite-difference probes).

Gradients are taken with respect to ring cores directly; the dense
weight a ring represents is never materialized by the training path.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .tensor import tensordot_counted

__all__ = [
    "Var",
    "Tape",
    "constant",
    "parameter",
    "reshape",
    "transpose",
    "tensordot",
    "conv2d",
    "relu",
    "add",
    "add_bias",
    "scale",
    "sum_all",
    "trace_bonds",
    "maxpool2x2",
    "softmax_xent",
    "finite_diff_check",
    "FDReport",
]


class Var:
    """A node value.  Leaves (constants, parameters) have no recorded op."""

    __slots__ = ("value", "name")

    def __init__(self, value, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Var(shape={self.value.shape}{tag})"


def constant(value, name=None) -> Var:
    return Var(value, name)


def parameter(value, name=None) -> Var:
    """A leaf whose .value the optimizer mutates in place between steps."""
    return Var(value, name)


class _Node:
    __slots__ = ("out", "parents", "fwd", "vjp")

    def __init__(self, out, parents, fwd, vjp):
        self.out = out
        self.parents = parents
        self.fwd = fwd
        self.vjp = vjp


class _TapeState(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []


_STATE = _TapeState()


class Tape:
    """Recorded op sequence for one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _STATE.stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _STATE.stack.pop()

    def replay(self) -> None:
        """Recompute every recorded value from current leaf values.

        With unchanged leaves this reproduces all values bit for bit
        (same ops, same order).
        """
        for node in self.nodes:
            node.out.value = node.fwd(*[p.value for p in node.parents])

    def backward(self, loss: Var) -> dict:
        """Reverse walk from ``loss``; returns {Var: gradient ndarray}.

        Accumulation order is fixed by the recording order, so repeated
        calls on the same tape are bit-identical.
        """
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        out = {loss: grads[id(loss)]}
        for node in reversed(self.nodes):
            g = grads.get(id(node.out))
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                out[parent] = grads[key]
        return out


def _record(value, parents, fwd, vjp, name=None) -> Var:
    outv = Var(value, name)
    if _STATE.stack:
        node = _Node(outv, tuple(parents), fwd, vjp)
        for tape in _STATE.stack:
            tape.nodes.append(node)
    return outv


# --- ops -------------------------------------------------------------------

def reshape(v: Var, shape) -> Var:
    shape = tuple(int(s) for s in shape)
    old = v.value.shape

    def fwd(x):
        return x.reshape(shape)

    return _record(fwd(v.value), [v], fwd, lambda g: (g.reshape(old),))


def transpose(v: Var, axes) -> Var:
    axes = tuple(int(a) for a in axes)
    inv = tuple(np.argsort(axes))

    def fwd(x):
        return x.transpose(axes)

    return _record(fwd(v.value), [v], fwd, lambda g: (g.transpose(inv),))


def _tensordot_grad_left(g, b, a_axes, b_axes, a_ndim):
    a_free = [i for i in range(a_ndim) if i not in a_axes]
    b_free = [i for i in range(b.ndim) if i not in b_axes]
    t = tensordot_counted(g, b, list(range(len(a_free), len(a_free) + len(b_free))), b_free)
    # t axes: a_free..., then the contracted a-axes ordered by their b pairing
    pair_order = sorted(range(len(b_axes)), key=lambda i: b_axes[i])
    layout = a_free + [a_axes[i] for i in pair_order]
    return t.transpose(np.argsort(layout))


def _tensordot_grad_right(g, a, a_axes, b_axes, b_ndim):
    a_free = [i for i in range(a.ndim) if i not in a_axes]
    b_free = [i for i in range(b_ndim) if i not in b_axes]
    t = tensordot_counted(g, a, list(range(len(a_free))), a_free)
    pair_order = sorted(range(len(a_axes)), key=lambda i: a_axes[i])
    layout = b_free + [b_axes[i] for i in pair_order]
    return t.transpose(np.argsort(layout))


def tensordot(a: Var, b: Var, a_axes, b_axes) -> Var:
    """Pairwise contraction; free modes of ``a`` then free modes of ``b``."""
    a_axes = [int(x) for x in a_axes]
    b_axes = [int(x) for x in b_axes]
    a_val, b_val = a.value, b.value
    a_ndim, b_ndim = a_val.ndim, b_val.ndim

    def fwd(x, y):
        return tensordot_counted(x, y, a_axes, b_axes)

    def vjp(g):
        return (_tensordot_grad_left(g, b_val, a_axes, b_axes, a_ndim),
                _tensordot_grad_right(g, a_val, a_axes, b_axes, b_ndim))

    return _record(fwd(a_val, b_val), [a, b], fwd, vjp)


def conv2d(x: Var, k: Var, stride: int = 1, pad: int = 0) -> Var:
    """Batched convolution op over the compiled/fallback kernels."""
    x_val, k_val = x.value, k.value
    _, h, w, _ = x_val.shape
    d = k_val.shape[0]

    def fwd(xv, kv):
        return _kernels.conv2d(xv, kv, stride=stride, pad=pad)

    def vjp(g):
        return (_kernels.conv2d_grad_input(g, k_val, stride, pad, h, w),
                _kernels.conv2d_grad_kernel(x_val, g, stride, pad, d))

    return _record(fwd(x_val, k_val), [x, k], fwd, vjp)


def relu(v: Var) -> Var:
    mask = v.value > 0  # subgradient 0 at the kink

    def fwd(x):
        return np.maximum(x, 0.0)

    return _record(fwd(v.value), [v], fwd, lambda g: (g * mask,))


def add(a: Var, b: Var) -> Var:
    if a.value.shape != b.value.shape:
        raise ValueError(f"add needs equal shapes, got {a.value.shape} and {b.value.shape}")

    def fwd(x, y):
        return x + y

    return _record(fwd(a.value, b.value), [a, b], fwd, lambda g: (g, g))


def add_bias(a: Var, bias: Var) -> Var:
    """Broadcast a (C,) bias over the trailing mode."""
    if bias.value.ndim != 1 or a.value.shape[-1] != bias.value.shape[0]:
        raise ValueError(
            f"bias shape {bias.value.shape} does not broadcast over {a.value.shape}")
    axes = tuple(range(a.value.ndim - 1))

    def fwd(x, c):
        return x + c

    return _record(fwd(a.value, bias.value), [a, bias], fwd,
                   lambda g: (g, g.sum(axis=axes)))


def scale(v: Var, c: float) -> Var:
    c = float(c)

    def fwd(x):
        return x * c

    return _record(fwd(v.value), [v], fwd, lambda g: (g * c,))


def sum_all(v: Var) -> Var:
    shape = v.value.shape

    def fwd(x):
        return np.asarray(x.sum())

    return _record(fwd(v.value), [v], fwd,
                   lambda g: (np.broadcast_to(g, shape).copy(),))


def trace_bonds(v: Var) -> Var:
    """Sum the diagonal of the first and last modes: closes a merged ring."""
    r = v.value.shape[0]
    if v.value.shape[-1] != r:
        raise ValueError(f"first and last modes must match, got {v.value.shape}")

    def fwd(x):
        return np.trace(x, axis1=0, axis2=x.ndim - 1)

    def vjp(g):
        gx = np.zeros_like(v.value)
        for i in range(r):
            gx[i, ..., i] = g
        return (gx,)

    return _record(fwd(v.value), [v], fwd, vjp)


def maxpool2x2(v: Var) -> Var:
    """2x2 max pooling with stride 2; ties give the first window slot."""
    b, h, w, c = v.value.shape
    if h % 2 or w % 2:
        raise ValueError(f"pooling needs even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2

    def windows(x):
        return (x.reshape(b, h2, 2, w2, 2, c)
                .transpose(0, 1, 3, 5, 2, 4)
                .reshape(b, h2, w2, c, 4))

    win = windows(v.value)
    idx = win.argmax(axis=-1)

    def fwd(x):
        return np.take_along_axis(windows(x), idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gw = np.zeros((b, h2, w2, c, 4))
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        return (gw.reshape(b, h2, w2, c, 2, 2)
                .transpose(0, 1, 4, 2, 5, 3)
                .reshape(b, h, w, c),)

    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return _record(out, [v], fwd, vjp)


def softmax_xent(logits: Var, labels) -> Var:
    """Mean cross-entropy of softmax(logits) against integer labels.

    Fused and shift-stabilized; the backward pass is the standard
    (softmax - onehot) / batch form.
    """
    labels = np.asarray(labels)
    if labels.ndim != 1 or logits.value.ndim != 2:
        raise ValueError("expected logits (B, K) and labels (B,)")
    bsz = logits.value.shape[0]
    if labels.shape[0] != bsz:
        raise ValueError(f"batch mismatch: {bsz} logits rows, {labels.shape[0]} labels")
    rows = np.arange(bsz)

    def fwd(z):
        zs = z - z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(zs).sum(axis=1))
        return np.asarray(np.mean(lse - zs[rows, labels]))

    z = logits.value
    zs = z - z.max(axis=1, keepdims=True)
    ez = np.exp(zs)
    probs = ez / ez.sum(axis=1, keepdims=True)

    def vjp(g):
        gz = probs.copy()
        gz[rows, labels] -= 1.0
        return (gz * (float(g) / bsz),)

    return _record(fwd(z), [logits], fwd, vjp)


# --- gradient verification --------------------------------------------------

@dataclass
class FDReport:
    max_rel_err: float
    checks: int
    worst: tuple  # (param name, flat index, analytic, numeric)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= 1e-5


def finite_diff_check(loss_fn, params, h: float = 1e-5, sample_count: int = 50,
                      seed: int = 0, floor: float = 1e-12) -> FDReport:
    """Compare tape gradients against central differences.

    ``loss_fn`` must rebuild the whole forward pass from current
    parameter values each call (no stale caches).  ``sample_count``
    coordinates are probed across all parameters, each giving
    |analytic - numeric| / (max(|analytic|, |numeric|) + floor).
    """
    with Tape() as tape:
        loss = loss_fn()
    grads = tape.backward(loss)

    sizes = np.array([p.value.size for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(sample_count, total), replace=False)

    max_rel = 0.0
    worst = (None, -1, 0.0, 0.0)
    bounds = np.cumsum(sizes)
    for flat in sorted(int(p) for p in picks):
        pi = int(np.searchsorted(bounds, flat, side="right"))
        local = flat - (0 if pi == 0 else int(bounds[pi - 1]))
        param = params[pi]
        buf = param.value.reshape(-1)
        old = buf[local]
        buf[local] = old + h
        f_plus = float(loss_fn().value)
        buf[local] = old - h
        f_minus = float(loss_fn().value)
        buf[local] = old
        numeric = (f_plus - f_minus) / (2.0 * h)
        g = grads.get(param)
        analytic = 0.0 if g is None else float(g.reshape(-1)[local])
        rel = abs(analytic - numeric) / (max(abs(analytic), abs(numeric)) + floor)
        if rel > max_rel:
            max_rel = rel
            worst = (param.name, local, analytic, numeric)
    return FDReport(max_rel_err=max_rel, checks=len(picks), worst=worst)
