"""Dense fp64 tensors with reverse-mode differentiation over a fixed op set.

Layout is channels-first everywhere (C,H,W for maps, 2-D for projections).
Each op that participates in differentiation records a backward closure on
its output node; Tensor.backward() replays the closures in reverse
topological order and then discards the tape. Tensors are immutable values
(the underlying buffers are marked read-only), so they are safe to share
across threads; a tape belongs to a single forward/backward pass.
"""

from __future__ import annotations

import math

import numpy as np

from . import kernels
from .errors import NumericError, ShapeError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64, order="C")
        _check_extents(arr)
        arr.flags.writeable = False
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @classmethod
    def _wrap(cls, arr, requires_grad=False):
        """Adopt a freshly allocated array without copying."""
        t = object.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        _check_extents(arr)
        arr.flags.writeable = False
        t.data = arr
        t.grad = None
        t.requires_grad = requires_grad
        t._parents = ()
        t._backward = None
        return t

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() requires a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor._wrap(self.data, requires_grad=False)

    def backward(self, grad=None):
        """Reverse-mode sweep from this node; the tape is discarded after."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(
                    f"backward() without an explicit gradient requires a scalar "
                    f"output, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.data.shape:
                raise ShapeError(
                    f"upstream gradient shape {grad.shape} != output shape {self.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        _accumulate(self, grad)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
                node._backward = None
                node._parents = ()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _check_extents(arr):
    if any(n < 1 for n in arr.shape):
        raise ShapeError(f"all extents must be >= 1, got shape {arr.shape}")


def _accumulate(t, g):
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _scalar(g):
    return float(np.asarray(g).reshape(-1)[0])


def _node(arr, parents, backward):
    req = any(p.requires_grad for p in parents)
    out = Tensor._wrap(arr, requires_grad=req)
    if req:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def parameter(data):
    return Tensor(data, requires_grad=True)


def he_uniform(rng, shape, fan_in):
    bound = math.sqrt(6.0 / fan_in)
    return parameter(rng.uniform(-bound, bound, size=shape))


# ---------------------------------------------------------------------------
# elementwise / linear algebra
# ---------------------------------------------------------------------------

def add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, g)

    return _node(out_data, (a, b), backward)


def mul(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            _accumulate(b, g * a.data)

    return _node(out_data, (a, b), backward)


def scale(a, s):
    s = float(s)

    def backward(g):
        _accumulate(a, g * s)

    return _node(a.data * s, (a,), backward)


def relu(a):
    mask = a.data > 0.0

    def backward(g):
        _accumulate(a, g * mask)

    return _node(np.where(mask, a.data, 0.0), (a,), backward)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"matmul: expected 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul: inner extents differ, {a.shape[1]} (a columns) vs "
            f"{b.shape[0]} (b rows)")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _node(out_data, (a, b), backward)


def sum_all(a):
    def backward(g):
        _accumulate(a, np.full(a.shape, _scalar(g)))

    return _node(np.array(a.data.sum()), (a,), backward)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------

def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")

    def backward(g):
        _accumulate(a, g.reshape(a.shape))

    return _node(a.data.reshape(shape), (a,), backward)


def transpose2d(a):
    if a.data.ndim != 2:
        raise ShapeError(f"transpose2d: expected 2-D, got {a.shape}")

    def backward(g):
        _accumulate(a, g.T)

    return _node(np.ascontiguousarray(a.data.T), (a,), backward)


def slice_cols(a, lo, hi):
    if a.data.ndim != 2:
        raise ShapeError(f"slice_cols: expected 2-D, got {a.shape}")
    if not (0 <= lo < hi <= a.shape[1]):
        raise ShapeError(f"slice_cols: bad range [{lo}, {hi}) for {a.shape}")

    def backward(g):
        full = np.zeros(a.shape)
        full[:, lo:hi] = g
        _accumulate(a, full)

    return _node(np.ascontiguousarray(a.data[:, lo:hi]), (a,), backward)


def concat_cols(parts):
    parts = tuple(parts)
    rows = parts[0].shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.shape[0] != rows:
            raise ShapeError("concat_cols: all parts must be 2-D with equal rows")
    widths = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                _accumulate(p, np.ascontiguousarray(g[:, lo:hi]))

    return _node(np.concatenate([p.data for p in parts], axis=1), parts, backward)


def axial_sum(rh, rw):
    """Broadcast-sum per-axis encodings into one (h*w, d) position table."""
    if rh.data.ndim != 2 or rw.data.ndim != 2 or rh.shape[1] != rw.shape[1]:
        raise ShapeError(
            f"axial_sum: expected (h,d) and (w,d) with equal d, got "
            f"{rh.shape} and {rw.shape}")
    h, d = rh.shape
    w = rw.shape[0]
    out_data = (rh.data[:, None, :] + rw.data[None, :, :]).reshape(h * w, d)

    def backward(g):
        gg = g.reshape(h, w, d)
        if rh.requires_grad:
            _accumulate(rh, gg.sum(axis=1))
        if rw.requires_grad:
            _accumulate(rw, gg.sum(axis=0))

    return _node(out_data, (rh, rw), backward)


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------

def _softmax_over(x, axes):
    m = x.max(axis=axes, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axes, keepdims=True)


def softmax_spatial(a):
    """Per-channel softmax over the H*W positions of a K,H,W tensor."""
    if a.data.ndim != 3:
        raise ShapeError(f"softmax_spatial: expected K,H,W, got {a.shape}")
    y = _softmax_over(a.data, (1, 2))

    def backward(g):
        dot = (g * y).sum(axis=(1, 2), keepdims=True)
        _accumulate(a, y * (g - dot))

    return _node(y, (a,), backward)


def softmax_rows(a):
    if a.data.ndim != 2:
        raise ShapeError(f"softmax_rows: expected 2-D, got {a.shape}")
    y = _softmax_over(a.data, (1,))

    def backward(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        _accumulate(a, y * (g - dot))

    return _node(y, (a,), backward)


def spatial_nll(logits, targets, valid):
    """Mean spatial cross-entropy over valid channels.

    targets holds one flat H*W cell index per channel; channels with
    valid == False do not contribute. Requires at least one valid channel.
    """
    if logits.data.ndim != 3:
        raise ShapeError(f"spatial_nll: expected K,H,W logits, got {logits.shape}")
    k, h, w = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    valid = np.asarray(valid, dtype=bool)
    if targets.shape != (k,) or valid.shape != (k,):
        raise ShapeError(
            f"spatial_nll: targets/valid must have shape ({k},), got "
            f"{targets.shape} and {valid.shape}")
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ShapeError("spatial_nll: no valid targets")
    flat = logits.data.reshape(k, h * w)
    m = flat.max(axis=1)
    lse = m + np.log(np.exp(flat - m[:, None]).sum(axis=1))
    picked = flat[np.arange(k), np.clip(targets, 0, h * w - 1)]
    loss = float(((lse - picked) * valid).sum() / n_valid)

    def backward(g):
        probs = _softmax_over(logits.data, (1, 2)).reshape(k, h * w)
        probs[np.arange(k), np.clip(targets, 0, h * w - 1)] -= 1.0
        probs *= (valid[:, None] * (_scalar(g) / n_valid))
        _accumulate(logits, probs.reshape(k, h, w))

    return _node(np.array(loss), (logits,), backward)


# ---------------------------------------------------------------------------
# convolution / resampling
# ---------------------------------------------------------------------------

def conv2d(x, w, b, stride=1, padding=0):
    """Cross-correlation over a C,H,W input with Cout,Cin,k,k weights."""
    if x.data.ndim != 3:
        raise ShapeError(f"conv2d: expected C,H,W input, got {x.shape}")
    if w.data.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: expected Cout,Cin,k,k weights, got {w.shape}")
    cin, h, wid = x.shape
    cout, wcin, k, _ = w.shape
    if wcin != cin:
        raise ShapeError(
            f"conv2d: weights expect Cin={wcin} but input has C={cin}")
    if b.shape != (cout,):
        raise ShapeError(f"conv2d: bias must have shape ({cout},), got {b.shape}")
    if k % 2 != 1:
        raise ShapeError(f"conv2d: kernel size must be odd, got k={k}")
    stride = int(stride)
    padding = int(padding)
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} / padding={padding}")
    if h + 2 * padding < k or wid + 2 * padding < k:
        raise ShapeError(
            f"conv2d: kernel {k} exceeds padded input {h + 2 * padding}x"
            f"{wid + 2 * padding}")
    y = kernels.conv2d_forward(x.data, w.data, b.data, stride, padding)

    def backward(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            _accumulate(x, kernels.conv2d_input_grad(
                g, w.data, stride, padding, h, wid))
        if w.requires_grad:
            _accumulate(w, kernels.conv2d_weight_grad(
                g, x.data, stride, padding, k))
        if b.requires_grad:
            _accumulate(b, g.sum(axis=(1, 2)))

    return _node(y, (x, w, b), backward)


def conv_transpose2d(x, w, stride=1):
    """Adjoint of conv2d (padding 0): C1,H,W input, C1,C2,k,k weights."""
    if x.data.ndim != 3:
        raise ShapeError(f"conv_transpose2d: expected C,H,W input, got {x.shape}")
    if w.data.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(
            f"conv_transpose2d: expected C1,C2,k,k weights, got {w.shape}")
    c1, h, wid = x.shape
    if w.shape[0] != c1:
        raise ShapeError(
            f"conv_transpose2d: weights expect C1={w.shape[0]} but input has "
            f"C={c1}")
    stride = int(stride)
    if stride < 1:
        raise ShapeError(f"conv_transpose2d: invalid stride={stride}")
    k = w.shape[2]
    out_h = (h - 1) * stride + k
    out_w = (wid - 1) * stride + k
    # scatter form == conv2d input-gradient with roles swapped
    y = kernels.conv2d_input_grad(x.data, w.data, stride, 0, out_h, out_w)

    def backward(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            zero_bias = np.zeros(c1)
            _accumulate(x, kernels.conv2d_forward(g, w.data, zero_bias, stride, 0))
        if w.requires_grad:
            # upstream grad plays the input role: dw[c1,c2] sums x against g
            _accumulate(w, kernels.conv2d_weight_grad(x.data, g, stride, 0, k))

    return _node(y, (x, w), backward)


def bilinear_upsample(x, factor):
    """Integer-factor bilinear upsampling, half-pixel convention."""
    if x.data.ndim != 3:
        raise ShapeError(f"bilinear_upsample: expected C,H,W, got {x.shape}")
    factor = int(factor)
    if factor < 1:
        raise ShapeError(f"bilinear_upsample: factor must be >= 1, got {factor}")
    if factor == 1:
        def backward_id(g):
            _accumulate(x, g)
        return _node(x.data.copy(), (x,), backward_id)
    c, h, w = x.shape
    y = kernels.upsample_forward(x.data, factor)

    def backward(g):
        _accumulate(x, kernels.upsample_input_grad(
            np.ascontiguousarray(g), factor, h, w))

    return _node(y, (x,), backward)


def roi_bilinear(x, fbox, output_size, sampling_ratio):
    """RoI average-of-bilinear-samples over a feature-grid box.

    fbox is (x1, y1, x2, y2) already in feature coordinates; out-of-grid
    taps contribute zero. geometry.roi_align is the image-space wrapper.
    """
    if x.data.ndim != 3:
        raise ShapeError(f"roi_bilinear: expected C,H,W feature, got {x.shape}")
    fx1, fy1, fx2, fy2 = (float(v) for v in fbox)
    out_h, out_w = (int(v) for v in output_size)
    ratio = int(sampling_ratio)
    if out_h < 1 or out_w < 1 or ratio < 1:
        raise ShapeError(
            f"roi_bilinear: invalid output_size={output_size} / "
            f"sampling_ratio={sampling_ratio}")
    c, h, w = x.shape
    y = kernels.roi_align_forward(x.data, fx1, fy1, fx2, fy2, out_h, out_w, ratio)

    def backward(g):
        _accumulate(x, kernels.roi_align_input_grad(
            np.ascontiguousarray(g), fx1, fy1, fx2, fy2, h, w, ratio))

    return _node(y, (x,), backward)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f, point, epsilon=1e-5):
    """Worst relative error between reverse-mode and central differences.

    f must map one Tensor to a scalar Tensor; the relative error uses
    max(|analytic|, |numeric|, 1e-8) as denominator.
    """
    epsilon = float(epsilon)
    if not (0.0 < epsilon <= 1e-2):
        raise ShapeError(f"grad_check: epsilon must be in (0, 1e-2], got {epsilon}")
    base = Tensor(point.data, requires_grad=True)
    out = f(base)
    if out.data.size != 1:
        raise ShapeError(f"grad_check: f must return a scalar, got {out.shape}")
    if not np.isfinite(out.data).all():
        raise NumericError("grad_check: non-finite function value at the point")
    out.backward()
    analytic = (np.zeros(base.data.size) if base.grad is None
                else base.grad.reshape(-1).copy())
    if not np.isfinite(analytic).all():
        raise NumericError("grad_check: non-finite analytic gradient")

    buf = np.array(base.data)
    flat = buf.reshape(-1)
    numeric = np.empty_like(analytic)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        fp = f(Tensor(buf)).item()
        flat[i] = orig - epsilon
        fm = f(Tensor(buf)).item()
        flat[i] = orig
        numeric[i] = (fp - fm) / (2.0 * epsilon)
    if not np.isfinite(numeric).all():
        raise NumericError("grad_check: non-finite finite-difference estimate")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max())
