"""Reverse-mode automatic differentiation on numpy arrays.

A Tensor wraps an ndarray; ops executed while a Tape is active record
themselves on that tape, and ``Tape.backward(loss)`` replays the records in
reverse to accumulate vector-Jacobian products.  Creation order is a valid
topological order because every op's inputs already exist when the op runs,
so no explicit graph sort is needed.

Everything here is deliberately small: only the operations the training and
evaluation paths actually use are provided.  Shapes follow the NHWC layout
for image tensors and kernels are stored as (kh, kw, in_channels, filters).
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

try:
    from . import _kernels as _K
except ImportError:  # pure-numpy fallbacks below stay in sync with the kernels
    _K = None


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; message names both shapes."""


class GradientError(RuntimeError):
    """Raised on invalid backward calls (non-scalar loss, empty tape)."""


_FLOATS = (np.float32, np.float64)


class Tensor:
    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _FLOATS:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


# ---------------------------------------------------------------------------
# Tape

_ACTIVE_TAPE: Optional["Tape"] = None


class Tape:
    """Records ops for one forward pass; backward() fills a gradient table.

    Gradients are keyed by tensor identity.  Calling backward() twice
    replaces the table rather than accumulating into it, so repeated calls
    return identical gradients.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._grads: dict[int, np.ndarray] = {}

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        self._outer = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._outer
        return False

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise GradientError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        self._grads = {}
        grads = self._grads
        grads[id(loss)] = np.ones_like(loss.data)
        for out, inputs, vjp in reversed(self._nodes):
            g = grads.get(id(out))
            if g is None:
                continue
            for inp, gi in zip(inputs, vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else prev + gi

    def grad(self, t: Tensor) -> Optional[np.ndarray]:
        return self._grads.get(id(t))


def _record(out: Tensor, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    tape = _ACTIVE_TAPE
    if tape is not None and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        tape._nodes.append((out, tuple(inputs), vjp))
    return out


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE


# ---------------------------------------------------------------------------
# Elementwise / linear ops


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, opname: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = Tensor(a.data * b.data)
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)),
    )


def scale(a: Tensor, s: float) -> Tensor:
    c = a.data.dtype.type(s)
    out = Tensor(a.data * c)
    return _record(out, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)
    return _record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.data.shape),))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _record(out, (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.data.shape[i] for i in ax]))
    s = tsum(a, axis=axis, keepdims=keepdims)
    return scale(s, 1.0 / count)


def leaky_relu(x: Tensor, leak: float) -> Tensor:
    d = x.data
    # subgradient at exactly zero is the leak slope
    lk = d.dtype.type(leak)
    if _K is not None:
        flat = np.ascontiguousarray(d).reshape(-1)
        out = Tensor(_K.leaky_forward(flat, lk).reshape(d.shape))

        def vjp(g):
            gf = np.ascontiguousarray(np.broadcast_to(g, d.shape)).reshape(-1)
            return (_K.leaky_backward(flat, gf, lk).reshape(d.shape),)

        return _record(out, (x,), vjp)

    neg = np.minimum(d, 0)
    neg *= lk
    out_arr = np.maximum(d, 0)
    out_arr += neg
    out = Tensor(out_arr)

    def vjp_np(g):
        dg = g * lk
        scaled = g * (1 - lk)
        scaled *= d > 0
        dg += scaled
        return (dg,)

    return _record(out, (x,), vjp_np)


def trow_slice(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice of the leading axis; the cotangent scatters back."""
    if not 0 <= start <= stop <= x.shape[0]:
        raise ShapeError(f"trow_slice: [{start}:{stop}] out of range for leading axis {x.shape[0]}")
    out = Tensor(x.data[start:stop].copy())

    def vjp(g):
        dx = np.zeros_like(x.data)
        dx[start:stop] = g
        return (dx,)

    return _record(out, (x,), vjp)


def clip(x: Tensor, lo, hi) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes only strictly inside the bounds.

    lo/hi may be scalars or arrays broadcastable to x.
    """
    d = x.data
    out_arr = np.clip(d, lo, hi)
    inside = (d > lo) & (d < hi)
    out = Tensor(out_arr)

    def vjp(g):
        return (np.where(inside, g, 0),)

    return _record(out, (x,), vjp)


# ---------------------------------------------------------------------------
# Convolution family (NHWC, kernels kh x kw x in_channels x filters)


def _same_pads(size: int, k: int, stride: int) -> tuple[int, int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def _pad_nhwc(x: np.ndarray, pt: int, pb: int, pl: int, pr: int) -> np.ndarray:
    if _K is not None:
        return _K.pad2d(np.ascontiguousarray(x), pt, pb, pl, pr)
    return np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    if _K is not None:
        return _K.im2col(np.ascontiguousarray(xp), kh, kw, stride, oh, ow)
    n, hp, wp, c = xp.shape
    sn, sh, sw, sc = xp.strides
    view = as_strided(
        xp,
        shape=(n, oh, ow, kh, kw, c),
        strides=(sn, sh * stride, sw * stride, sh, sw, sc),
    )
    return np.ascontiguousarray(view).reshape(n * oh * ow, kh * kw * c)


def _col2im(
    dcols: np.ndarray, n: int, oh: int, ow: int, kh: int, kw: int, stride: int, c: int,
    pt: int, pl: int, h: int, w: int,
) -> np.ndarray:
    """Scatter-add patch rows back onto the unpadded (n, h, w, c) grid."""
    if _K is not None:
        return _K.col2im(dcols, n, oh, ow, kh, kw, stride, c, pt, pl, h, w)
    hp = (oh - 1) * stride + kh
    wp = (ow - 1) * stride + kw
    dxp = np.zeros((n, hp, wp, c), dtype=dcols.dtype)
    patches = dcols.reshape(n, oh, ow, kh, kw, c)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :] += patches[:, :, :, i, j, :]
    out = np.zeros((n, h, w, c), dtype=dcols.dtype)
    u1 = min(pt + h, hp)
    v1 = min(pl + w, wp)
    out[:, : u1 - pt, : v1 - pl, :] = dxp[:, pt:u1, pl:v1, :]
    return out


def _conv_geometry(h: int, w: int, kh: int, kw: int, stride: int, padding: str):
    if padding == "same":
        oh, pt, pb = _same_pads(h, kh, stride)
        ow, pl, pr = _same_pads(w, kw, stride)
    elif padding == "valid":
        if kh > h or kw > w:
            raise ShapeError(f"conv2d: kernel ({kh},{kw}) exceeds input ({h},{w}) with valid padding")
        oh = (h - kh) // stride + 1
        ow = (w - kw) // stride + 1
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"conv2d: unknown padding {padding!r}")
    return oh, ow, pt, pb, pl, pr


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: need 4-d input and kernel, got {x.shape} and {w.shape}")
    n, h, wd, c = x.shape
    kh, kw, cin, f = w.shape
    if c != cin:
        raise ShapeError(f"conv2d: input channels {x.shape} vs kernel {w.shape}")
    oh, ow, pt, pb, pl, pr = _conv_geometry(h, wd, kh, kw, stride, padding)
    if pt or pb or pl or pr:
        xp = _pad_nhwc(x.data, pt, pb, pl, pr)
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    wmat = w.data.reshape(kh * kw * cin, f)
    out = Tensor((cols @ wmat).reshape(n, oh, ow, f))
    need_dx = x.requires_grad
    need_dw = w.requires_grad

    def vjp(g):
        g2 = np.ascontiguousarray(g).reshape(n * oh * ow, f)
        dw = (cols.T @ g2).reshape(kh, kw, cin, f) if need_dw else None
        dx = None
        if need_dx:
            dcols = g2 @ wmat.T
            dx = _col2im(dcols, n, oh, ow, kh, kw, stride, cin, pt, pl, h, wd)
        return (dx, dw)

    return _record(out, (x, w), vjp)


def deconv2d(x: Tensor, w: Tensor, stride: int = 2) -> Tensor:
    """Transposed convolution: the adjoint of conv2d(stride, 'same').

    Output spatial size is exactly stride times the input size, so
    <deconv2d(x, w), y> == <x, conv2d(y, w)> for matching shapes.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"deconv2d: need 4-d input and kernel, got {x.shape} and {w.shape}")
    n, h, wd, f = x.shape
    kh, kw, c, f2 = w.shape
    if f != f2:
        raise ShapeError(f"deconv2d: input channels {x.shape} vs kernel {w.shape}")
    oh, ow = h * stride, wd * stride
    _oh, pt, pb = _same_pads(oh, kh, stride)
    _ow, pl, pr = _same_pads(ow, kw, stride)
    if _oh != h or _ow != wd:
        raise ShapeError(f"deconv2d: geometry mismatch for input {x.shape} kernel {w.shape} stride {stride}")
    wmat = w.data.reshape(kh * kw * c, f)
    x2 = np.ascontiguousarray(x.data).reshape(n * h * wd, f)
    ycols = x2 @ wmat.T
    out = Tensor(_col2im(ycols, n, h, wd, kh, kw, stride, c, pt, pl, oh, ow))
    need_dx = x.requires_grad
    need_dw = w.requires_grad

    def vjp(g):
        gp = _pad_nhwc(g, pt, pb, pl, pr)
        gcols = _im2col(gp, kh, kw, stride, h, wd)
        dx = (gcols @ wmat).reshape(n, h, wd, f) if need_dx else None
        dw = (gcols.T @ x2).reshape(kh, kw, c, f) if need_dw else None
        return (dx, dw)

    return _record(out, (x, w), vjp)


# ---------------------------------------------------------------------------
# Batch normalization


class BNState:
    """Running moments for one batchnorm layer; updated in place during training."""

    __slots__ = ("mean", "var")

    def __init__(self, channels: int, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BNState,
    train: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
    update_running: bool = True,
) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm: need NHWC input, got shape {x.shape}")
    c = x.shape[3]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: gamma/beta shapes {gamma.shape}/{beta.shape} vs {c} channels")
    d = x.data
    m = d.shape[0] * d.shape[1] * d.shape[2]
    if m == 0:
        raise ValueError("batchnorm: empty batch")
    dt = d.dtype.type
    d2 = d.reshape(m, c)
    use_kernel = _K is not None and gamma.data.dtype == d.dtype and beta.data.dtype == d.dtype
    if train and use_kernel:
        d2 = np.ascontiguousarray(d2)
        out2, mu, var, inv, xhat2 = _K.bn_train_forward(d2, gamma.data, beta.data, float(eps))
        if update_running:
            mom = dt(momentum)
            state.mean = mom * state.mean + (1 - mom) * mu
            state.var = mom * state.var + (1 - mom) * var
        out = Tensor(out2.reshape(d.shape))

        def vjp_k(g):
            g2 = np.ascontiguousarray(np.broadcast_to(g, d.shape)).reshape(m, c)
            dx2, dgamma, dbeta = _K.bn_train_backward(g2, xhat2, gamma.data, inv)
            return (
                dx2.reshape(d.shape) if x.requires_grad else None,
                dgamma if gamma.requires_grad else None,
                dbeta if beta.requires_grad else None,
            )

        return _record(out, (x, gamma, beta), vjp_k)
    if train:
        mu = d2.sum(axis=0)
        mu /= dt(m)
        # one fused pass for the second moment; clamp at 0 against cancellation
        var = np.einsum("nc,nc->c", d2, d2) / dt(m) - mu * mu
        np.maximum(var, 0, out=var)
        if update_running:
            mom = dt(momentum)
            state.mean = mom * state.mean + (1 - mom) * mu
            state.var = mom * state.var + (1 - mom) * var
        inv = 1.0 / np.sqrt(var + dt(eps))
        xhat2 = d2 - mu
        xhat2 *= inv
        out2 = xhat2 * gamma.data
        out2 += beta.data
        out = Tensor(out2.reshape(d.shape))

        def vjp(g):
            g2 = g.reshape(m, c)
            dgamma = np.einsum("nc,nc->c", g2, xhat2) if gamma.requires_grad else None
            dbeta = g2.sum(axis=0) if beta.requires_grad else None
            dx = None
            if x.requires_grad:
                dxhat = g2 * gamma.data
                t1 = dxhat.sum(axis=0)
                t1 /= dt(m)
                t2 = np.einsum("nc,nc->c", dxhat, xhat2) / dt(m)
                dxhat -= t1
                dxhat -= xhat2 * t2
                dxhat *= inv
                dx = dxhat.reshape(d.shape)
            return (dx, dgamma, dbeta)

        return _record(out, (x, gamma, beta), vjp)

    inv = 1.0 / np.sqrt(state.var + dt(eps))
    xhat2 = d2 - state.mean
    xhat2 *= inv
    out2 = xhat2 * gamma.data
    out2 += beta.data
    out = Tensor(out2.reshape(d.shape))

    def vjp_eval(g):
        g2 = g.reshape(m, c)
        dgamma = np.einsum("nc,nc->c", g2, xhat2) if gamma.requires_grad else None
        dbeta = g2.sum(axis=0) if beta.requires_grad else None
        dx = (g2 * (gamma.data * inv)).reshape(d.shape) if x.requires_grad else None
        return (dx, dgamma, dbeta)

    return _record(out, (x, gamma, beta), vjp_eval)


# ---------------------------------------------------------------------------
# Losses


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy between softmax(logits) and target distributions.

    Stable via max subtraction.  Targets are a constant (n, C) array of
    per-class weights; each row must sum to 1.
    """
    t = targets.data if isinstance(targets, Tensor) else targets
    z = logits.data
    if z.ndim != 2 or z.shape != t.shape:
        raise ShapeError(f"softmax_cross_entropy: logits {z.shape} vs targets {t.shape}")
    rowsums = t.sum(axis=1)
    if not np.allclose(rowsums, 1.0, atol=1e-4):
        raise ValueError("softmax_cross_entropy: target rows must sum to 1")
    n = z.shape[0]
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    e = np.exp(shifted)
    sums = e.sum(axis=1, keepdims=True)
    logp = shifted - np.log(sums)
    out = Tensor(np.asarray(-(t * logp).sum() / n, dtype=z.dtype))
    p = e / sums

    def vjp(g):
        return (g * (p - t) / z.dtype.type(n),)

    return _record(out, (logits,), vjp)


def margin_hinge(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean hinge margin max(0, z_true - max_{j != true} z_j).

    Zero (and zero-gradient) for rows already misclassified.
    """
    z = logits.data
    n, c = z.shape
    idx = np.arange(n)
    true_logit = z[idx, labels]
    masked = z.copy()
    masked[idx, labels] = -np.inf
    runner = masked.argmax(axis=1)
    margin = true_logit - masked[idx, runner]
    active = margin > 0
    out = Tensor(np.asarray(np.where(active, margin, 0).sum() / n, dtype=z.dtype))

    def vjp(g):
        dz = np.zeros_like(z)
        w = (g / z.dtype.type(n)) * active.astype(z.dtype)
        dz[idx, labels] = w
        dz[idx, runner] -= w
        return (dz,)

    return _record(out, (logits,), vjp)


# ---------------------------------------------------------------------------
# Parameters and the optimizer step


class ParamStore:
    """Named parameters plus per-parameter momentum buffers and layer state.

    `state` holds non-trained arrays that still belong in checkpoints
    (batchnorm running moments).
    """

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.momentum: dict[str, np.ndarray] = {}
        self.state: dict[str, BNState] = {}

    def add(self, name: str, array: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(array, requires_grad=trainable)
        self.params[name] = t
        self.momentum[name] = np.zeros_like(t.data)
        return t

    def add_bn_state(self, name: str, channels: int, dtype=np.float32) -> BNState:
        st = BNState(channels, dtype)
        self.state[name] = st
        return st

    def set_trainable(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag

    def grads(self, tape: Tape) -> dict[str, np.ndarray]:
        out = {}
        for name, t in self.params.items():
            g = tape.grad(t)
            if g is not None:
                out[name] = g
        return out

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())


def momentum_step(store: ParamStore, grads: dict[str, np.ndarray], lr: float, momentum: float) -> None:
    """buffer <- momentum * buffer + grad;  value <- value - lr * buffer."""
    for name, g in grads.items():
        if name not in store.params:
            raise KeyError(f"momentum_step: gradient for unknown parameter {name!r}")
        p = store.params[name]
        if g.shape != p.data.shape:
            raise ShapeError(f"momentum_step: gradient shape {g.shape} vs parameter {p.data.shape} for {name!r}")
        dt = p.data.dtype.type
        buf = store.momentum[name]
        buf = dt(momentum) * buf + g.astype(p.data.dtype, copy=False)
        store.momentum[name] = buf
        fresh = Tensor(p.data - dt(lr) * buf, requires_grad=p.requires_grad)
        store.params[name] = fresh
