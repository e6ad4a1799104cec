"""Reverse-mode automatic differentiation on numpy arrays.

A Tape records operations during the forward pass; Tape.backward replays
them in reverse to accumulate gradients.  Tapes are rebuilt every forward
pass (define-by-run), so control flow in model code is plain Python.

All data is float64.  Every op validates its output for NaN/Inf and raises
NumericError instead of propagating garbage.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError, NotScalar, NumericError, ShapeMismatch

_F64 = np.float64


def _as_f64(value) -> np.ndarray:
    arr = np.asarray(value, dtype=_F64)
    return arr


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op} produced a non-finite value")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tape:
    """Records the computation graph for one forward pass."""

    def __init__(self) -> None:
        self._inputs: list[tuple[int, ...]] = []
        self._backs: list = []
        self._tracked: list[bool] = []
        self._shapes: list[tuple[int, ...]] = []

    def _record(self, data: np.ndarray, inputs: tuple[Tensor, ...], back) -> Tensor:
        idx = len(self._backs)
        tracked = any(t._tracked() for t in inputs) if inputs else False
        self._inputs.append(tuple(t.idx for t in inputs))
        self._backs.append(back)
        self._tracked.append(tracked)
        self._shapes.append(data.shape)
        return Tensor(self, idx, data)

    def leaf(self, value) -> Tensor:
        """A gradient-tracked input (parameters, probe points)."""
        data = _as_f64(value)
        _check_finite(data, "leaf")
        t = self._record(data, (), None)
        self._tracked[t.idx] = True
        return t

    def constant(self, value) -> Tensor:
        """An input that never receives a gradient (data, targets)."""
        data = _as_f64(value)
        _check_finite(data, "constant")
        return self._record(data, (), None)

    def _lift(self, value) -> Tensor:
        if isinstance(value, Tensor):
            if value.tape is not self:
                raise ShapeMismatch("tensors belong to different tapes")
            return value
        return self.constant(value)

    def backward(self, root: Tensor) -> Gradients:
        """Accumulate d(root)/d(node) for every tracked node.

        `root` must be scalar.  Returns a Gradients view keyed by Tensor.
        """
        if root.tape is not self:
            raise ShapeMismatch("root tensor lives on a different tape")
        if root.data.size != 1:
            raise NotScalar(f"backward needs a scalar, got shape {root.data.shape}")
        grads: list[np.ndarray | None] = [None] * len(self._backs)
        grads[root.idx] = np.ones_like(root.data)
        for idx in range(root.idx, -1, -1):
            g = grads[idx]
            back = self._backs[idx]
            if g is None or back is None:
                continue
            contribs = back(g)
            for in_idx, contrib in zip(self._inputs[idx], contribs):
                if contrib is None or not self._tracked[in_idx]:
                    continue
                if grads[in_idx] is None:
                    grads[in_idx] = np.zeros(self._shapes[in_idx], dtype=_F64)
                grads[in_idx] += contrib
            grads[idx] = None if idx != root.idx else g
        return Gradients(self, grads)


class Gradients:
    """Read-only gradient lookup from one backward pass."""

    def __init__(self, tape: Tape, grads: list) -> None:
        self._tape = tape
        self._grads = grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        if t.tape is not self._tape:
            raise ShapeMismatch("tensor is not from this tape")
        g = self._grads[t.idx]
        if g is None:
            return np.zeros(t.data.shape, dtype=_F64)
        return g


class Tensor:
    """A node on a Tape: an ndarray plus its position in the graph."""

    __slots__ = ("tape", "idx", "data")

    # Makes ndarray <op> Tensor dispatch to our reverse operators instead of
    # numpy broadcasting over an object array.
    __array_priority__ = 100.0

    def __init__(self, tape: Tape, idx: int, data: np.ndarray) -> None:
        self.tape = tape
        self.idx = idx
        self.data = data

    def _tracked(self) -> bool:
        return self.tape._tracked[self.idx]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalar(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        return _binary(self, other, "add")

    __radd__ = __add__

    def __sub__(self, other):
        return _binary(self, other, "sub")

    def __rsub__(self, other):
        return _binary(self.tape._lift(other), self, "sub")

    def __mul__(self, other):
        return _binary(self, other, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _binary(self, other, "div")

    def __rtruediv__(self, other):
        return _binary(self.tape._lift(other), self, "div")

    def __neg__(self):
        data = -self.data
        return self.tape._record(data, (self,), lambda g: (-g,))

    def __getitem__(self, key) -> Tensor:
        data = self.data[key]
        if not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=_F64)
        shape = self.data.shape

        def back(g, key=key, shape=shape):
            gx = np.zeros(shape, dtype=_F64)
            np.add.at(gx, key, g)
            return (gx,)

        return self.tape._record(data, (self,), back)

    # -- elementwise functions ----------------------------------------

    def exp(self) -> Tensor:
        with np.errstate(over="ignore"):
            out = np.exp(self.data)
        _check_finite(out, "exp")
        return self.tape._record(out, (self,), lambda g: (g * out,))

    def log(self) -> Tensor:
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(self.data)
        _check_finite(out, "log")
        x = self.data
        return self.tape._record(out, (self,), lambda g: (g / x,))

    def sqrt(self) -> Tensor:
        out = np.sqrt(self.data)
        _check_finite(out, "sqrt")

        def back(g):
            if np.any(out == 0.0):
                raise NumericError("sqrt gradient at zero")
            return (g * (0.5 / out),)

        return self.tape._record(out, (self,), back)

    def square(self) -> Tensor:
        out = self.data * self.data
        _check_finite(out, "square")
        x = self.data
        return self.tape._record(out, (self,), lambda g: (g * (2.0 * x),))

    def sin(self) -> Tensor:
        out = np.sin(self.data)
        x = self.data
        return self.tape._record(out, (self,), lambda g: (g * np.cos(x),))

    def cos(self) -> Tensor:
        out = np.cos(self.data)
        x = self.data
        return self.tape._record(out, (self,), lambda g: (g * -np.sin(x),))

    def softplus(self) -> Tensor:
        # log(1 + e^x) via logaddexp, stable for large |x|
        out = np.logaddexp(0.0, self.data)
        x = self.data
        return self.tape._record(out, (self,), lambda g: (g * _sigmoid(x),))

    def relu(self) -> Tensor:
        out = np.maximum(self.data, 0.0)
        mask = self.data > 0.0
        return self.tape._record(out, (self,), lambda g: (g * mask,))

    def leaky_relu(self, slope: float = 0.01) -> Tensor:
        out = np.where(self.data > 0.0, self.data, slope * self.data)
        scale = np.where(self.data > 0.0, 1.0, slope)
        return self.tape._record(out, (self,), lambda g: (g * scale,))

    def sigmoid(self) -> Tensor:
        out = _sigmoid(self.data)
        return self.tape._record(out, (self,), lambda g: (g * out * (1.0 - out),))

    def tanh(self) -> Tensor:
        out = np.tanh(self.data)
        return self.tape._record(out, (self,), lambda g: (g * (1.0 - out * out),))

    def asin(self) -> Tensor:
        with np.errstate(invalid="ignore"):
            out = np.arcsin(self.data)
        _check_finite(out, "asin")
        x = self.data

        def back(g):
            if np.any(np.abs(x) == 1.0):
                raise NumericError("asin gradient at the domain edge")
            return (g / np.sqrt(1.0 - x * x),)

        return self.tape._record(out, (self,), back)

    # -- shape and reduction ------------------------------------------

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        try:
            out = self.data.reshape(shape)
        except ValueError as exc:
            raise ShapeMismatch(f"cannot reshape {old} to {shape}") from exc
        return self.tape._record(out, (self,), lambda g: (g.reshape(old),))

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        out = np.asarray(self.data.sum(axis=axis, keepdims=keepdims), dtype=_F64)
        shape = self.data.shape

        def back(g):
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            g2 = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(g2, shape).copy(),)

        return self.tape._record(out, (self,), back)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        if axis is None:
            n = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = 1
            for a in axes:
                n *= self.data.shape[a]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # piecewise form avoids overflow in exp for large |x|
    out = np.empty_like(x)
    pos = x >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _binary(a: Tensor, b, op: str) -> Tensor:
    tape = a.tape
    b = tape._lift(b)
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError as exc:
        raise ShapeMismatch(
            f"{op}: shapes {a.data.shape} and {b.data.shape} do not broadcast"
        ) from exc
    ash, bsh = a.data.shape, b.data.shape
    if op == "add":
        out = a.data + b.data
        back = lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh))
    elif op == "sub":
        out = a.data - b.data
        back = lambda g: (_unbroadcast(g, ash), -_unbroadcast(g, bsh))
    elif op == "mul":
        out = a.data * b.data
        ad, bd = a.data, b.data
        back = lambda g: (
            _unbroadcast(g * bd, ash),
            _unbroadcast(g * ad, bsh),
        )
    elif op == "div":
        if np.any(b.data == 0.0):
            raise NumericError("division by zero")
        out = a.data / b.data
        ad, bd = a.data, b.data
        back = lambda g: (
            _unbroadcast(g / bd, ash),
            _unbroadcast(-g * ad / (bd * bd), bsh),
        )
    else:  # pragma: no cover
        raise ValueError(op)
    _check_finite(out, op)
    return tape._record(out, (a, b), back)


def maximum(a: Tensor, b) -> Tensor:
    """Elementwise max; ties send the gradient to the first argument."""
    tape = a.tape
    b = tape._lift(b)
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError as exc:
        raise ShapeMismatch(
            f"maximum: shapes {a.data.shape} and {b.data.shape} do not broadcast"
        ) from exc
    out = np.maximum(a.data, b.data)
    take_a = a.data >= b.data
    ash, bsh = a.data.shape, b.data.shape

    def back(g):
        return (
            _unbroadcast(g * take_a, ash),
            _unbroadcast(g * ~take_a, bsh),
        )

    return tape._record(out, (a, b), back)


def minimum(a: Tensor, b) -> Tensor:
    """Elementwise min; ties send the gradient to the first argument."""
    tape = a.tape
    b = tape._lift(b)
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError as exc:
        raise ShapeMismatch(
            f"minimum: shapes {a.data.shape} and {b.data.shape} do not broadcast"
        ) from exc
    out = np.minimum(a.data, b.data)
    take_a = a.data <= b.data
    ash, bsh = a.data.shape, b.data.shape

    def back(g):
        return (
            _unbroadcast(g * take_a, ash),
            _unbroadcast(g * ~take_a, bsh),
        )

    return tape._record(out, (a, b), back)


def atan2(y: Tensor, x) -> Tensor:
    """Elementwise two-argument arctangent, range (-pi, pi]."""
    tape = y.tape
    x = tape._lift(x)
    try:
        np.broadcast_shapes(y.data.shape, x.data.shape)
    except ValueError as exc:
        raise ShapeMismatch(
            f"atan2: shapes {y.data.shape} and {x.data.shape} do not broadcast"
        ) from exc
    out = np.arctan2(y.data, x.data)
    yd, xd = y.data, x.data
    ysh, xsh = yd.shape, xd.shape

    def back(g):
        denom = xd * xd + yd * yd
        if np.any(denom == 0.0):
            raise NumericError("atan2 gradient at the origin")
        return (
            _unbroadcast(g * xd / denom, ysh),
            _unbroadcast(-g * yd / denom, xsh),
        )

    return tape._record(out, (y, x), back)


def stack_cols(*columns: Tensor) -> Tensor:
    """Stack equal-length 1-D tensors into an (n, k) matrix."""
    if not columns:
        raise ShapeMismatch("stack_cols needs at least one column")
    tape = columns[0].tape
    n = columns[0].data.shape
    for c in columns:
        if c.tape is not tape:
            raise ShapeMismatch("tensors belong to different tapes")
        if c.data.ndim != 1 or c.data.shape != n:
            raise ShapeMismatch("stack_cols expects equal-length vectors")
    out = np.stack([c.data for c in columns], axis=1)

    def back(g):
        return tuple(g[:, i] for i in range(len(columns)))

    return tape._record(out, tuple(columns), back)


def stack(tensors: list[Tensor] | tuple[Tensor, ...], axis: int = 0) -> Tensor:
    """Stack same-shape tensors along a new axis."""
    if not tensors:
        raise ShapeMismatch("stack needs at least one tensor")
    tape = tensors[0].tape
    shape = tensors[0].data.shape
    for t in tensors:
        if t.tape is not tape:
            raise ShapeMismatch("tensors belong to different tapes")
        if t.data.shape != shape:
            raise ShapeMismatch(f"stack expects equal shapes, got {t.data.shape} vs {shape}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return tape._record(out, tuple(tensors), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product."""
    tape = a.tape
    b = tape._lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatch("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(
            f"matmul: inner dims differ, {a.data.shape} @ {b.data.shape}"
        )
    out = a.data @ b.data
    _check_finite(out, "matmul")
    ad, bd = a.data, b.data
    return tape._record(out, (a, b), lambda g: (g @ bd.T, ad.T @ g))


# -- convolution -------------------------------------------------------


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    """Unfold (B,C,H,W) into (B, C*k*k, Ho*Wo) patch columns."""
    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    B, C, H, W = x.shape
    ho = (H - k) // stride + 1
    wo = (W - k) // stride + 1
    sb, sc, sh, sw = x.strides
    view = np.lib.stride_tricks.as_strided(
        x,
        shape=(B, C, k, k, ho, wo),
        strides=(sb, sc, sh, sw, sh * stride, sw * stride),
    )
    cols = np.ascontiguousarray(view).reshape(B, C * k * k, ho * wo)
    return cols, ho, wo


def _col2im(gcols: np.ndarray, xshape, k: int, stride: int, pad: int) -> np.ndarray:
    """Fold patch-column gradients back onto the (padded) input grid."""
    B, C, H, W = xshape
    hp, wp = H + 2 * pad, W + 2 * pad
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    g6 = gcols.reshape(B, C, k, k, ho, wo)
    gx = np.zeros((B, C, hp, wp), dtype=_F64)
    for ki in range(k):
        for kj in range(k):
            gx[:, :, ki : ki + ho * stride : stride, kj : kj + wo * stride : stride] += g6[
                :, :, ki, kj
            ]
    if pad > 0:
        gx = gx[:, :, pad : hp - pad, pad : wp - pad]
    return gx


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation: x (B,Cin,H,W) with w (Cout,Cin,k,k)."""
    tape = x.tape
    if w.tape is not tape:
        raise ShapeMismatch("tensors belong to different tapes")
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeMismatch("conv2d expects 4-D input and weight")
    B, cin, H, W = x.data.shape
    cout, cin_w, k, k2 = w.data.shape
    if cin != cin_w or k != k2:
        raise ShapeMismatch(f"conv2d: weight {w.data.shape} does not fit input {x.data.shape}")
    if H + 2 * padding < k or W + 2 * padding < k:
        raise ShapeMismatch(f"conv2d: kernel {k} larger than padded input {(H, W)}")
    cols, ho, wo = _im2col(x.data, k, stride, padding)
    wmat = w.data.reshape(cout, cin * k * k)
    out = np.matmul(wmat, cols).reshape(B, cout, ho, wo)
    _check_finite(out, "conv2d")
    xshape = x.data.shape
    wshape = w.data.shape

    def back(g):
        gm = g.reshape(B, cout, ho * wo)
        gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(wshape)
        gcols = np.matmul(wmat.T, gm)
        gx = _col2im(gcols, xshape, k, stride, padding)
        return (gx, gw)

    return tape._record(out, (x, w), back)


# -- batch normalization ----------------------------------------------


class BatchNormState:
    """Running statistics for one batch-norm layer (one entry per channel)."""

    def __init__(self, channels: int) -> None:
        self.mean = np.zeros(channels, dtype=_F64)
        self.var = np.ones(channels, dtype=_F64)

    def copy(self) -> "BatchNormState":
        s = BatchNormState(len(self.mean))
        s.mean = self.mean.copy()
        s.var = self.var.copy()
        return s


def batch_norm(
    x: Tensor,
    gamma: Tensor | None,
    beta: Tensor | None,
    state: BatchNormState,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize (B,C,H,W) over batch and spatial axes, per channel.

    In training mode the batch statistics are used and the running stats in
    `state` are updated in place (unbiased variance, torch convention).  In
    eval mode the running stats are used.  gamma/beta may be None for a
    normalization without learned scale/shift.
    """
    tape = x.tape
    if x.data.ndim != 4:
        raise ShapeMismatch("batch_norm expects a 4-D input")
    B, C, H, W = x.data.shape
    if len(state.mean) != C:
        raise ShapeMismatch(f"batch_norm state has {len(state.mean)} channels, input has {C}")
    for t in (gamma, beta):
        if t is not None and t.data.shape != (C,):
            raise ShapeMismatch(f"batch_norm affine params must have shape ({C},)")
    m = B * H * W
    if training:
        if m < 2:
            raise ShapeMismatch("batch_norm training needs at least 2 values per channel")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        state.mean *= 1.0 - momentum
        state.mean += momentum * mu
        state.var *= 1.0 - momentum
        state.var += momentum * var * (m / (m - 1))
    else:
        mu = state.mean
        var = state.var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[:, None, None]) * inv[:, None, None]
    gd = gamma.data if gamma is not None else None
    out = xhat if gd is None else xhat * gd[:, None, None]
    if beta is not None:
        out = out + beta.data[:, None, None]
    _check_finite(out, "batch_norm")

    inputs = [x]
    if gamma is not None:
        inputs.append(gamma)
    if beta is not None:
        inputs.append(beta)

    def back(g):
        ggam = (g * xhat).sum(axis=(0, 2, 3)) if gamma is not None else None
        gbet = g.sum(axis=(0, 2, 3)) if beta is not None else None
        gxhat = g if gd is None else g * gd[:, None, None]
        if training:
            # gradient through the batch statistics themselves
            s1 = gxhat.sum(axis=(0, 2, 3))
            s2 = (gxhat * xhat).sum(axis=(0, 2, 3))
            gx = (
                gxhat
                - (s1 / m)[:, None, None]
                - xhat * (s2 / m)[:, None, None]
            ) * inv[:, None, None]
        else:
            gx = gxhat * inv[:, None, None]
        out = [gx]
        if gamma is not None:
            out.append(ggam)
        if beta is not None:
            out.append(gbet)
        return tuple(out)

    return tape._record(out, tuple(inputs), back)


# -- losses ------------------------------------------------------------


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Mean binary cross-entropy on raw logits.

    Computed as softplus(-z) + (1-y)*z, which is exact and never takes
    log of zero.
    """
    tape = logits.tape
    target = tape._lift(target)
    per = (-logits).softplus() + (1.0 - target) * logits
    return per.mean()


def mse(a: Tensor, b) -> Tensor:
    """Mean squared error over all elements."""
    return (a - b).square().mean()


# -- optimizer ---------------------------------------------------------


class Adam:
    """Adam with bias correction, operating on dicts of named arrays."""

    def __init__(
        self,
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Moments and timestep as named arrays, for checkpointing."""
        out = {"t": np.array([float(self.t)])}
        for name, arr in self.m.items():
            out[f"m.{name}"] = arr
        for name, arr in self.v.items():
            out[f"v.{name}"] = arr
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["t"][0])
        self.m = {}
        self.v = {}
        for name, arr in arrays.items():
            if name.startswith("m."):
                self.m[name[2:]] = arr.astype(_F64)
            elif name.startswith("v."):
                self.v[name[2:]] = arr.astype(_F64)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update params in place from grads (missing names are skipped)."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, g in grads.items():
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_l2(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their joint L2 norm is <= max_norm.

    Returns the pre-clip norm.
    """
    total = 0.0
    for g in grads.values():
        total += float(np.dot(g.ravel(), g.ravel()))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# -- checkpoint blocks -------------------------------------------------

_MAGIC = b"CURIO1"


def save_param_block(fh, arrays: dict[str, np.ndarray]) -> None:
    """Write name->array records to a binary stream.

    Little-endian: magic, then per array (name length u32, UTF-8 name,
    rank u32, dims u32[], f64 data).  Names are written sorted so the byte
    stream is a pure function of the contents.
    """
    fh.write(_MAGIC)
    for name in sorted(arrays):
        # asarray, not ascontiguousarray: the latter silently promotes 0-d
        # arrays to 1-d, and tobytes() handles layout anyway.
        arr = np.asarray(arrays[name], dtype=_F64)
        encoded = name.encode("utf-8")
        fh.write(struct.pack("<I", len(encoded)))
        fh.write(encoded)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype("<f8").tobytes())


def load_param_block(fh) -> dict[str, np.ndarray]:
    """Read a block written by save_param_block."""
    magic = fh.read(len(_MAGIC))
    if magic != _MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    arrays: dict[str, np.ndarray] = {}
    while True:
        raw = fh.read(4)
        if not raw:
            return arrays
        if len(raw) < 4:
            raise FormatError(f"truncated checkpoint after {len(arrays)} arrays")
        (name_len,) = struct.unpack("<I", raw)
        name = fh.read(name_len)
        rank_raw = fh.read(4)
        if len(name) < name_len or len(rank_raw) < 4:
            raise FormatError(f"truncated checkpoint after {len(arrays)} arrays")
        (rank,) = struct.unpack("<I", rank_raw)
        dims_raw = fh.read(4 * rank)
        if len(dims_raw) < 4 * rank:
            raise FormatError(f"truncated checkpoint in record {name!r}")
        dims = struct.unpack(f"<{rank}I", dims_raw)
        count = int(np.prod(dims)) if dims else 1
        data = fh.read(8 * count)
        if len(data) < 8 * count:
            raise FormatError(f"truncated checkpoint in record {name!r}")
        arrays[name.decode("utf-8")] = np.frombuffer(data, dtype="<f8").reshape(dims).copy()
