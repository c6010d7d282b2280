"""Dense numeric kernels with paired forward/backward functions.

Every forward function returns ``(out, cache)``; the matching backward takes
the cache and the upstream gradient. Arrays are float64 ``(N, C, H, W)``.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "ShapeError",
    "ConvSpec",
    "BatchNormState",
    "as_tensor",
    "conv2d",
    "conv2d_backward",
    "batch_norm",
    "batch_norm_backward",
    "relu",
    "relu_backward",
    "record_relu_signs",
    "sigmoid",
    "sigmoid_backward",
    "activation",
    "activation_backward",
    "hadamard",
    "hadamard_backward",
    "linear",
    "linear_backward",
    "global_avg_pool",
    "global_avg_pool_backward",
    "softmax",
    "softmax_cross_entropy",
    "fft2d",
    "ifft2d",
    "finite_difference_gradient",
]


class ShapeError(ValueError):
    """Raised when array shapes violate a kernel's contract."""


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def as_tensor(x, name: str = "input") -> np.ndarray:
    """Return ``x`` as a float64 4-D array, raising ShapeError otherwise."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 4:
        raise ShapeError(f"{name}: expected 4-D (N, C, H, W), got ndim={arr.ndim}")
    return arr


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)

    def __post_init__(self):
        object.__setattr__(self, "kernel", _pair(self.kernel))
        object.__setattr__(self, "stride", _pair(self.stride))
        object.__setattr__(self, "padding", _pair(self.padding))
        if min(self.stride) < 1:
            raise ShapeError(f"stride must be >= 1, got {self.stride}")
        if min(self.kernel) < 1 or min(self.padding) < 0:
            raise ShapeError(f"invalid kernel {self.kernel} / padding {self.padding}")

    @classmethod
    def same(cls, in_channels: int, out_channels: int, k: int = 3, stride: int = 1) -> ConvSpec:
        return cls(in_channels, out_channels, (k, k), (stride, stride), (k // 2, k // 2))

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        sh, sw = self.stride
        ph, pw = self.padding
        ho = (h + 2 * ph - kh) // sh + 1
        wo = (w + 2 * pw - kw) // sw + 1
        if h + 2 * ph - kh < 0:
            raise ShapeError(f"height: kernel {kh} larger than padded input {h + 2 * ph}")
        if w + 2 * pw - kw < 0:
            raise ShapeError(f"width: kernel {kw} larger than padded input {w + 2 * pw}")
        return ho, wo

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, *self.kernel)


@dataclass(frozen=True)
class BatchNormState:
    """Per-channel affine parameters plus running statistics.

    Instances are treated as values: ``batch_norm`` in train mode returns a
    new state with updated running statistics instead of mutating this one.
    The ``gamma``/``beta`` arrays are shared with the new state so optimizers
    may update them in place.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, beta: float = 0.0, **kw) -> BatchNormState:
        return cls(
            gamma=np.ones(channels),
            beta=np.full(channels, float(beta)),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            **kw,
        )

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise ValueError(f"momentum must lie in (0, 1), got {self.momentum}")
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


# --------------------------------------------------------------------------
# convolution


def _windows(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    # (N, Ho, Wo, kh, kw, C) strided view over a padded channels-last input
    n, _, _, c = xp.shape
    s = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, ho, wo, kh, kw, c),
        strides=(s[0], s[1] * sh, s[2] * sw, s[1], s[2], s[3]),
        writeable=False,
    )


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation with zero padding.

    Parameters
    ----------
    x : array (N, C_in, H, W)
    weight : array (C_out, C_in, kh, kw)
    bias : array (C_out,) or None
    stride, padding : int or pair

    Returns
    -------
    out : array (N, C_out, Ho, Wo)
    cache : tuple consumed by :func:`conv2d_backward`
    """
    x = as_tensor(x)
    weight = as_tensor(weight, "weight")
    cout, cin, kh, kw = weight.shape
    if x.shape[1] != cin:
        raise ShapeError(f"channels: input has {x.shape[1]}, weight expects {cin}")
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape != (cout,):
            raise ShapeError(f"bias: expected shape ({cout},), got {bias.shape}")
    spec = ConvSpec(cin, cout, (kh, kw), _pair(stride), _pair(padding))
    n, _, h, w = x.shape
    ho, wo = spec.output_hw(h, w)
    (sh, sw), (ph, pw) = spec.stride, spec.padding

    if kh == 1 and kw == 1 and ph == 0 and pw == 0:
        xs = x[:, :, ::sh, ::sw][:, :, :ho, :wo]
        cols = np.ascontiguousarray(xs.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cin)
    else:
        xp = np.zeros((n, h + 2 * ph, w + 2 * pw, cin))
        xp[:, ph : ph + h, pw : pw + w, :] = x.transpose(0, 2, 3, 1)
        # rows are output pixels, columns (kh, kw, C_in) taps: one matmul does the contraction
        cols = _windows(xp, kh, kw, sh, sw, ho, wo).reshape(n * ho * wo, kh * kw * cin)
    wmat = weight.transpose(0, 2, 3, 1).reshape(cout, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias[None, :, None, None]
    return out, (x.shape, weight, bias is not None, spec, cols)


def conv2d_backward(cache, dout):
    """Gradients of :func:`conv2d` with respect to input, weight and bias.

    ``d_bias`` is None when the forward call had no bias.
    """
    try:
        x_shape, weight, has_bias, spec, cols = cache
    except (TypeError, ValueError):
        raise ShapeError("conv2d_backward: cache was not produced by conv2d") from None
    dout = np.asarray(dout, dtype=np.float64)
    n, cin, h, w = x_shape
    cout, _, kh, kw = weight.shape
    ho, wo = spec.output_hw(h, w)
    if dout.shape != (n, cout, ho, wo):
        raise ShapeError(f"d_output: expected {(n, cout, ho, wo)}, got {dout.shape}")
    (sh, sw), (ph, pw) = spec.stride, spec.padding
    db = dout.sum(axis=(0, 2, 3)) if has_bias else None

    d2 = dout.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
    wmat = weight.transpose(0, 2, 3, 1).reshape(cout, -1)
    dw = (d2.T @ cols).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
    dcols = (d2 @ wmat).reshape(n, ho, wo, kh, kw, cin)
    if kh == 1 and kw == 1 and ph == 0 and pw == 0 and sh == 1 and sw == 1:
        dx = dcols.reshape(n, h, w, cin)
    else:
        dx = np.zeros((n, h + 2 * ph, w + 2 * pw, cin))
        for i in range(kh):
            for j in range(kw):
                dx[:, i : i + sh * ho : sh, j : j + sw * wo : sw, :] += dcols[:, :, :, i, j, :]
        dx = dx[:, ph : ph + h, pw : pw + w, :]
    return np.ascontiguousarray(dx.transpose(0, 3, 1, 2)), np.ascontiguousarray(dw), db


# --------------------------------------------------------------------------
# batch normalization


def batch_norm(x, state: BatchNormState, mode: str = "train"):
    """Per-channel batch normalization.

    Returns ``(out, cache, new_state)``. In ``"eval"`` mode ``new_state`` is
    ``state`` itself.
    """
    x = as_tensor(x)
    c = x.shape[1]
    for name in ("gamma", "beta", "running_mean", "running_var"):
        if getattr(state, name).shape != (c,):
            raise ShapeError(f"batch_norm: {name} has shape {getattr(state, name).shape}, input has {c} channels")
    if np.any(state.running_var < 0):
        raise ValueError("batch_norm: running_var contains negative entries")
    g = state.gamma[None, :, None, None]
    b = state.beta[None, :, None, None]
    if mode == "train":
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if m == 0:
            raise ValueError("batch_norm: empty batch in train mode")
        mean = x.mean(axis=(0, 2, 3))
        xc = x - mean[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = xc * inv_std[None, :, None, None]
        out = xhat * g + b
        mom = state.momentum
        unbiased = var * m / (m - 1) if m > 1 else var
        new_state = replace(
            state,
            running_mean=(1 - mom) * state.running_mean + mom * mean,
            running_var=(1 - mom) * state.running_var + mom * unbiased,
        )
        return out, ("train", xhat, inv_std, state.gamma), new_state
    if mode == "eval":
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x - state.running_mean[None, :, None, None]) * inv_std[None, :, None, None]
        return xhat * g + b, ("eval", xhat, inv_std, state.gamma), state
    raise ValueError(f"batch_norm: unknown mode {mode!r}")


def batch_norm_backward(cache, dout):
    """Return ``(d_input, d_gamma, d_beta)``."""
    mode, xhat, inv_std, gamma = cache
    dout = np.asarray(dout, dtype=np.float64)
    if dout.shape != xhat.shape:
        raise ShapeError(f"batch_norm_backward: d_output {dout.shape} vs cached {xhat.shape}")
    dbeta = dout.sum(axis=(0, 2, 3))
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dxhat = dout * gamma[None, :, None, None]
    if mode == "eval":
        return dxhat * inv_std[None, :, None, None], dgamma, dbeta
    mean_dxhat = dxhat.mean(axis=(0, 2, 3), keepdims=True)
    mean_dxhat_xhat = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
    dx = (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * inv_std[None, :, None, None]
    return dx, dgamma, dbeta


# --------------------------------------------------------------------------
# pointwise ops


_relu_log: contextvars.ContextVar[list | None] = contextvars.ContextVar("relu_log", default=None)


@contextlib.contextmanager
def record_relu_signs():
    """Collect the sign pattern of every ReLU input evaluated inside the block.

    Gradient checks use this to reject finite-difference stencils that
    straddle a kink.
    """
    log: list = []
    token = _relu_log.set(log)
    try:
        yield log
    finally:
        _relu_log.reset(token)


def relu(x):
    x = np.asarray(x, dtype=np.float64)
    log = _relu_log.get()
    if log is not None:
        log.append(x > 0)
    # np.where keeps zeros positive (never -0.0), which keeps residual sums bit-stable
    return np.where(x > 0, x, 0.0), x


def relu_backward(cache, dout):
    return np.where(cache > 0, dout, 0.0)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out, out


def sigmoid_backward(cache, dout):
    return dout * cache * (1.0 - cache)


_ACTIVATIONS = {
    "relu": (relu, relu_backward),
    "sigmoid": (sigmoid, sigmoid_backward),
}


def activation(x, kind: str):
    try:
        fwd, _ = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fwd(x)


def activation_backward(cache, dout, kind: str):
    return _ACTIVATIONS[kind][1](cache, dout)


def hadamard(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"hadamard: shapes {a.shape} and {b.shape} differ")
    return a * b, (a, b)


def hadamard_backward(cache, dout):
    a, b = cache
    return dout * b, dout * a


# --------------------------------------------------------------------------
# readout


def global_avg_pool(x):
    x = as_tensor(x)
    return x.mean(axis=(2, 3), keepdims=True), x.shape


def global_avg_pool_backward(cache, dout):
    n, c, h, w = cache
    return np.broadcast_to(np.asarray(dout).reshape(n, c, 1, 1) / (h * w), cache).copy()


def linear(x, weight, bias=None):
    """Affine map ``x @ weight.T + bias``; ``x`` is flattened per sample."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(x.shape[0], -1)
    weight = np.asarray(weight, dtype=np.float64)
    if weight.ndim != 2 or weight.shape[1] != flat.shape[1]:
        raise ShapeError(f"linear: input features {flat.shape[1]} vs weight shape {weight.shape}")
    out = flat @ weight.T
    if bias is not None:
        out = out + bias
    return out, (x.shape, flat, weight, bias is not None)


def linear_backward(cache, dout):
    x_shape, flat, weight, has_bias = cache
    dx = (dout @ weight).reshape(x_shape)
    dw = dout.T @ flat
    db = dout.sum(axis=0) if has_bias else None
    return dx, dw, db


# --------------------------------------------------------------------------
# losses


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def check_distribution(p, name: str = "labels", tol: float = 1e-9) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 1:
        p = p[None, :]
    if p.ndim != 2:
        raise ShapeError(f"{name}: expected (N, K), got shape {p.shape}")
    bad = np.flatnonzero((p < 0).any(axis=1) | ~np.isfinite(p).all(axis=1) | (np.abs(p.sum(axis=1) - 1) > tol))
    if bad.size:
        raise ValueError(f"{name}: row {bad[0]} is not a probability distribution")
    return p


def softmax_cross_entropy(logits, soft_labels):
    """Mean soft-label cross-entropy and its gradient w.r.t. ``logits``."""
    z = np.asarray(logits, dtype=np.float64)
    y = check_distribution(soft_labels)
    if z.shape != y.shape:
        raise ShapeError(f"softmax_cross_entropy: logits {z.shape} vs labels {y.shape}")
    n = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    log_p = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -float((y * log_p).sum()) / n
    return loss, (np.exp(log_p) - y) / n


# --------------------------------------------------------------------------
# Fourier transforms


def fft2d(image):
    """Unnormalized forward 2-D DFT of a real or complex array."""
    return np.fft.fft2(np.asarray(image))


def ifft2d(spectrum):
    """Inverse of :func:`fft2d` (carries the 1/(H*W) factor)."""
    return np.fft.ifft2(np.asarray(spectrum))


# --------------------------------------------------------------------------
# numeric oracle


def finite_difference_gradient(f, params, eps: float = 1e-4, indices=None):
    """Central-difference gradient of a scalar function.

    ``params`` is perturbed in place and restored. If ``indices`` (flat
    positions) is given only those coordinates are estimated and the result
    is a 1-D array aligned with ``indices``; otherwise the full gradient with
    ``params``' shape is returned.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    p = params if isinstance(params, np.ndarray) else np.array(params, dtype=np.float64)
    flat = p.reshape(-1)
    if not np.shares_memory(flat, p):
        raise ValueError("params must be a contiguous array")
    idx = np.arange(flat.size) if indices is None else np.asarray(indices)
    grad = np.empty(idx.size)
    for k, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(p))
        flat[i] = orig - eps
        fm = float(f(p))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        grad[k] = (fp - fm) / (2 * eps)
    return grad.reshape(p.shape) if indices is None else grad
