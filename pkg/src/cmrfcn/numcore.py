"""Differentiable layer primitives, loss, optimiser and a finite-difference checker.

Activations are numpy arrays laid out as (batch, channels, height, width).
Every layer comes as a forward function returning ``(out, cache)`` and a
backward function consuming the upstream gradient plus that cache. All ops
compute in the dtype of their inputs, so the same code serves the float32
training path and the float64 gradient-check path.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    ConfigError,
    NonFiniteError,
    ShapeError,
    UninitialisedStatisticsError,
)

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
UPSAMPLE_FACTORS = (2, 4, 8, 16)


# ---------------------------------------------------------------------------
# parameters and optimiser state


@dataclass
class Param:
    """A named trainable tensor with its gradient and Adam moments."""

    name: str
    value: np.ndarray
    grad: np.ndarray = None
    m: np.ndarray = None
    v: np.ndarray = None

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.m is None:
            self.m = np.zeros_like(self.value)
        if self.v is None:
            self.v = np.zeros_like(self.value)
        for arr in (self.grad, self.m, self.v):
            if arr.shape != self.value.shape:
                raise ShapeError(f"{self.name}: state shape {arr.shape} != value shape {self.value.shape}")

    def zero_grad(self):
        self.grad[...] = 0


@dataclass
class OptimizerConfig:
    alpha: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError(f"learning rate must be positive, got {self.alpha}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError(f"moment decay rates must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if self.t < 0:
            raise ConfigError(f"step counter must be non-negative, got {self.t}")


def adam_step(params: Iterable[Param], config: OptimizerConfig) -> None:
    """Apply one bias-corrected Adam update in place.

    All gradients are screened before anything is touched, so a non-finite
    gradient leaves every parameter and the step counter unchanged.
    """
    params = list(params)
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient in parameter {p.name!r}")
    config.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** config.t
    c2 = 1.0 - b2 ** config.t
    for p in params:
        g = p.grad
        p.m *= b1
        p.m += (1.0 - b1) * g
        p.v *= b2
        p.v += (1.0 - b2) * (g * g)
        m_hat = p.m / c1
        v_hat = p.v / c2
        p.value -= (config.alpha * m_hat / (np.sqrt(v_hat) + config.epsilon)).astype(p.value.dtype)


# ---------------------------------------------------------------------------
# convolutions


def _check_nchw(x, what="input"):
    if x.ndim != 4:
        raise ShapeError(f"{what} must be 4-D (N, C, H, W), got shape {x.shape}")


def _cm(x):
    """Channel-major (C, N, H, W) view of an NCHW tensor.

    Layers return NCHW views over channel-major storage, so chained layers
    pass data through without copies and each conv is one GEMM over the batch.
    """
    return x.transpose(1, 0, 2, 3)


def conv2d(x, weight, bias):
    """3x3 convolution, stride 1, zero padding 1 (output keeps H and W)."""
    _check_nchw(x)
    if weight.ndim != 4 or weight.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d weight must be (Cout, Cin, 3, 3), got {weight.shape}")
    n, cin, h, w = x.shape
    cout = weight.shape[0]
    if weight.shape[1] != cin:
        raise ShapeError(f"conv2d: input has {cin} channels but weight expects {weight.shape[1]}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")

    xp = np.pad(_cm(x), ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((cin, 9, n, h, w), dtype=x.dtype)
    for k in range(9):
        dy, dx = divmod(k, 3)
        cols[:, k] = xp[:, :, dy:dy + h, dx:dx + w]
    cols = cols.reshape(cin * 9, n * h * w)
    out = weight.reshape(cout, cin * 9) @ cols
    out += bias[:, None]
    return _cm(out.reshape(cout, n, h, w)), (cols, weight, x.shape)


def conv2d_backward(dout, cache):
    cols, weight, xshape = cache
    n, cin, h, w = xshape
    cout = weight.shape[0]
    dout = _cm(dout).reshape(cout, n * h * w)
    db = dout.sum(axis=1)
    dw = (dout @ cols.T).reshape(weight.shape)
    dcols = (weight.reshape(cout, cin * 9).T @ dout).reshape(cin, 9, n, h, w)
    dxp = np.zeros((cin, n, h + 2, w + 2), dtype=dout.dtype)
    for k in range(9):
        dy, dx = divmod(k, 3)
        dxp[:, :, dy:dy + h, dx:dx + w] += dcols[:, k]
    return _cm(dxp[:, :, 1:-1, 1:-1]), dw, db


def conv1x1(x, weight, bias):
    """Per-pixel affine map across channels."""
    _check_nchw(x)
    if weight.ndim != 4 or weight.shape[2:] != (1, 1):
        raise ShapeError(f"conv1x1 weight must be (Cout, Cin, 1, 1), got {weight.shape}")
    n, cin, h, w = x.shape
    cout = weight.shape[0]
    if weight.shape[1] != cin:
        raise ShapeError(f"conv1x1: input has {cin} channels but weight expects {weight.shape[1]}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv1x1: bias shape {bias.shape} != ({cout},)")
    xf = _cm(x).reshape(cin, n * h * w)
    out = weight.reshape(cout, cin) @ xf
    out += bias[:, None]
    return _cm(out.reshape(cout, n, h, w)), (xf, weight, x.shape)


def conv1x1_backward(dout, cache):
    xf, weight, xshape = cache
    n, cin, h, w = xshape
    cout = weight.shape[0]
    dout = _cm(dout).reshape(cout, n * h * w)
    db = dout.sum(axis=1)
    dw = (dout @ xf.T).reshape(weight.shape)
    dx = weight.reshape(cout, cin).T @ dout
    return _cm(dx.reshape(cin, n, h, w)), dw, db


def transposed_conv(x, factor, weight, bias):
    """Per-channel transposed convolution upsampling by ``factor``.

    Kernel 2f x 2f, stride f, padding f/2, so the output is exactly
    (f*h, f*w). ``weight`` has shape (C, 1, 2f, 2f): each channel owns its
    kernel, making this the adjoint of a depthwise strided convolution.
    """
    if factor not in UPSAMPLE_FACTORS:
        raise ConfigError(f"unsupported upsampling factor {factor}; expected one of {UPSAMPLE_FACTORS}")
    _check_nchw(x)
    n, c, h, w = x.shape
    f = factor
    if weight.shape != (c, 1, 2 * f, 2 * f):
        raise ShapeError(f"transposed_conv weight must be ({c}, 1, {2 * f}, {2 * f}), got {weight.shape}")
    if bias.shape != (c,):
        raise ShapeError(f"transposed_conv: bias shape {bias.shape} != ({c},)")

    # Output row u = q*f + r (before cropping the f/2 padding) receives
    # x[q] * k[r] + x[q-1] * k[r+f]; same along columns. Gathering the four
    # shifted inputs turns each channel into a (pixels x 4) @ (4 x f*f) product.
    xp = np.pad(_cm(x), ((0, 0), (0, 0), (1, 1), (1, 1)))
    shifts = np.empty((c, n, h + 1, w + 1, 4), dtype=x.dtype)
    blocks = np.empty((c, 4, f * f), dtype=weight.dtype)
    for ab, (a, b) in enumerate(_SHIFTS):
        shifts[..., ab] = xp[:, :, 1 - a:2 - a + h, 1 - b:2 - b + w]
        blocks[:, ab] = weight[:, 0, a * f:(a + 1) * f, b * f:(b + 1) * f].reshape(c, f * f)
    shifts = shifts.reshape(c, n * (h + 1) * (w + 1), 4)
    full = np.matmul(shifts, blocks).reshape(c, n, h + 1, w + 1, f, f)
    p = f // 2
    out = full.transpose(0, 1, 2, 4, 3, 5).reshape(c, n, (h + 1) * f, (w + 1) * f)
    out = out[:, :, p:p + f * h, p:p + f * w] + bias[:, None, None, None]
    return _cm(out), (shifts, blocks, f, x.shape)


_SHIFTS = ((0, 0), (0, 1), (1, 0), (1, 1))


def transposed_conv_backward(dout, cache):
    shifts, blocks, f, (n, c, h, w) = cache
    p = f // 2
    dfull = np.zeros((c, n, (h + 1) * f, (w + 1) * f), dtype=dout.dtype)
    dfull[:, :, p:p + f * h, p:p + f * w] = _cm(dout)
    dfull = (dfull.reshape(c, n, h + 1, f, w + 1, f)
             .transpose(0, 1, 2, 4, 3, 5)
             .reshape(c, n * (h + 1) * (w + 1), f * f))
    dblocks = np.matmul(shifts.transpose(0, 2, 1), dfull)
    dshifts = np.matmul(dfull, blocks.transpose(0, 2, 1)).reshape(c, n, h + 1, w + 1, 4)
    dxp = np.zeros((c, n, h + 2, w + 2), dtype=dout.dtype)
    dw = np.zeros((c, 1, 2 * f, 2 * f), dtype=blocks.dtype)
    for ab, (a, b) in enumerate(_SHIFTS):
        dxp[:, :, 1 - a:2 - a + h, 1 - b:2 - b + w] += dshifts[..., ab]
        dw[:, 0, a * f:(a + 1) * f, b * f:(b + 1) * f] = dblocks[:, ab].reshape(c, f, f)
    db = dout.sum(axis=(0, 2, 3))
    return _cm(dxp[:, :, 1:-1, 1:-1]), dw, db


def bilinear_kernel(factor: int, channels: int, dtype=np.float32) -> np.ndarray:
    """Bilinear interpolation weights for :func:`transposed_conv`."""
    size = 2 * factor
    centre = (size - 1) / 2.0
    og = np.arange(size)
    k1 = 1.0 - np.abs(og - centre) / factor
    k2 = np.outer(k1, k1).astype(dtype)
    return np.broadcast_to(k2, (channels, 1, size, size)).copy()


# ---------------------------------------------------------------------------
# normalisation, activation, pooling, concatenation


@dataclass
class RunningStats:
    """Per-channel moving averages of batch mean and variance.

    ``mean`` and ``var`` stay ``None`` until the first training-mode pass.
    """

    mean: np.ndarray | None = None
    var: np.ndarray | None = None

    @property
    def initialised(self) -> bool:
        return self.mean is not None


def batch_norm(x, gamma, beta, stats: RunningStats | None, mode="train",
               momentum=BN_MOMENTUM, eps=BN_EPS):
    _check_nchw(x)
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma/beta must have shape ({c},)")
    if mode == "train":
        if n * h * w < 2:
            raise ShapeError("batch_norm in train mode needs at least 2 values per channel")
        mu = x.mean(axis=(0, 2, 3))
        xc = x - mu[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        if stats is not None:
            if not stats.initialised:
                stats.mean = np.zeros(c, dtype=x.dtype)
                stats.var = np.ones(c, dtype=x.dtype)
            stats.mean = (momentum * stats.mean + (1 - momentum) * mu).astype(stats.mean.dtype)
            stats.var = (momentum * stats.var + (1 - momentum) * var).astype(stats.var.dtype)
    elif mode == "infer":
        if stats is None or not stats.initialised:
            raise UninitialisedStatisticsError("batch_norm infer mode requires running statistics; "
                                               "none recorded yet (uninitialised statistics)")
        mu, var = stats.mean.astype(x.dtype), stats.var.astype(x.dtype)
        xc = x - mu[None, :, None, None]
    else:
        raise ConfigError(f"unknown batch_norm mode {mode!r}")
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * inv_std[None, :, None, None]
    out = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return out, (xhat, inv_std, gamma)


def batch_norm_backward(dout, cache):
    """Gradients for the training-mode forward."""
    xhat, inv_std, gamma = cache
    m = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    dbeta = dout.sum(axis=(0, 2, 3))
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    # dx = gamma * inv_std / m * (m * dout - sum(dout) - xhat * sum(dout * xhat))
    scale = (gamma * inv_std / m)[None, :, None, None]
    dx = scale * (m * dout - dbeta[None, :, None, None] - xhat * dgamma[None, :, None, None])
    return dx, dgamma, dbeta


def relu(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def max_pool2(x):
    """2x2 max pooling with stride 2."""
    _check_nchw(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2 needs even height and width, got {h}x{w}")
    win = (_cm(x).reshape(c, n, h // 2, 2, w // 2, 2)
           .transpose(0, 1, 2, 4, 3, 5)
           .reshape(c, n, h // 2, w // 2, 4))
    idx = win.argmax(axis=-1)  # first maximum in scan order
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return _cm(out), (idx, x.shape)


def max_pool2_backward(dout, cache):
    idx, (n, c, h, w) = cache
    dwin = np.zeros((c, n, h // 2, w // 2, 4), dtype=dout.dtype)
    np.put_along_axis(dwin, idx[..., None], _cm(dout)[..., None], axis=-1)
    return _cm(dwin.reshape(c, n, h // 2, w // 2, 2, 2)
               .transpose(0, 1, 2, 4, 3, 5)
               .reshape(c, n, h, w))


def concat_channels(inputs: Sequence[np.ndarray]):
    if not inputs:
        raise ShapeError("concat_channels needs at least one input")
    for t in inputs:
        _check_nchw(t)
    n, _, h, w = inputs[0].shape
    for t in inputs[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(f"concat_channels: shape {t.shape} does not match batch/spatial {(n, h, w)}")
    sizes = [t.shape[1] for t in inputs]
    return _cm(np.concatenate([_cm(t) for t in inputs], axis=0)), sizes


def concat_channels_backward(dout, sizes):
    return np.split(dout, np.cumsum(sizes)[:-1], axis=1)


# ---------------------------------------------------------------------------
# loss


def softmax(logits, axis=1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits, labels, ignore_classes=()):
    """Mean pixelwise cross entropy of softmax(logits) against integer labels.

    Pixels whose label is in ``ignore_classes`` contribute nothing; the mean
    runs over the remaining pixels. Returns ``(loss, probabilities, cache)``.
    """
    _check_nchw(logits, "logits")
    n, k, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {(n, h, w)}")
    bad = (labels < 0) | (labels >= k)
    if bad.any():
        pos = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"label {int(labels[pos])} at voxel {pos} outside [0, {k})")

    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    probs = np.exp(logp)
    lab = labels.astype(np.intp)
    picked = np.take_along_axis(logp, lab[:, None], axis=1)[:, 0]
    weight = np.ones(labels.shape, dtype=logits.dtype)
    for c in ignore_classes:
        weight[labels == c] = 0
    count = weight.sum()
    denom = max(float(count), 1.0)
    loss = float(-(picked * weight).sum(dtype=np.float64) / denom)
    return loss, probs, (probs, lab, weight, denom)


def softmax_cross_entropy_backward(cache, dloss=1.0):
    probs, lab, weight, denom = cache
    grad = probs.copy()
    onehot = np.take_along_axis(grad, lab[:, None], axis=1)
    np.put_along_axis(grad, lab[:, None], onehot - 1, axis=1)
    grad *= (weight / denom * dloss)[:, None].astype(grad.dtype)
    return grad


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    n_checked: int
    tolerance: float
    worst_index: tuple = ()
    skipped: int = 0
    details: list = field(default_factory=list, repr=False)

    @property
    def passed(self) -> bool:
        return bool(self.n_checked > 0 and self.max_rel_error < self.tolerance)

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (f"{verdict} {self.name}: max rel err {self.max_rel_error:.3e} "
                f"over {self.n_checked} coords (tol {self.tolerance:g})"
                + (f", {self.skipped} skipped at kinks" if self.skipped else ""))


def grad_check(f: Callable[[], float], x: np.ndarray, analytic: np.ndarray, *,
               h=1e-3, tolerance=1e-4, indices=None, floor=1e-8, name="op",
               skip: Callable[[tuple], bool] | None = None) -> GradCheckReport:
    """Compare ``analytic`` with central differences of the scalar ``f``.

    ``f`` takes no arguments and must read ``x`` (perturbed in place here).
    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    ``skip`` may veto coordinates, e.g. ones sitting on a relu kink.
    """
    if x.dtype != np.float64:
        raise TypeError("grad_check runs in float64; cast the evaluation path first")
    if indices is None:
        indices = list(np.ndindex(*x.shape))
    worst, worst_idx, checked, skipped = 0.0, (), 0, 0
    details = []
    for idx in indices:
        idx = tuple(int(i) for i in idx)
        if skip is not None and skip(idx):
            skipped += 1
            continue
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        num = (fp - fm) / (2 * h)
        a = float(analytic[idx])
        err = abs(a - num) / max(abs(a), abs(num), floor)
        details.append((idx, a, num, err))
        checked += 1
        if err > worst or checked == 1:
            worst, worst_idx = err, idx
    return GradCheckReport(name, worst, checked, tolerance, worst_idx, skipped, details)
