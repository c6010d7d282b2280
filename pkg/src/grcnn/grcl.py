"""Gated recurrent convolutional layer: forward recursion and exact backward.

The block computes::

    x_0 = A_0(u)
    g_t = B_t(x_{t-1}) + C(u)                     t = 1..T
    x_t = x_{t-1} + sigmoid(g_t) * A_t(x_{t-1})   t = 1..T

``A`` operators are conv -> batch-norm -> ReLU; ``B`` and ``C`` are
conv -> batch-norm (the sigmoid follows directly). ``C(u)`` is evaluated once
and shared by every step.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels as K

__all__ = [
    "GateMode",
    "ConvBN",
    "GrclParams",
    "init_grcl",
    "grcl_forward",
    "grcl_backward",
    "residual_chain",
    "convbn_forward",
    "convbn_backward",
]


class GateMode(str, enum.Enum):
    LEARNED = "learned"
    ABLATED = "ablated"
    SATURATED_OPEN = "saturated_open"
    SATURATED_CLOSED = "saturated_closed"


@dataclass
class ConvBN:
    """Bias-free convolution followed by batch norm and an optional ReLU."""

    weight: np.ndarray
    bn: K.BatchNormState
    stride: int = 1
    padding: int = 0
    relu: bool = True

    @classmethod
    def create(cls, rng, cin: int, cout: int, k: int, stride: int = 1, relu: bool = True, beta: float = 0.0):
        return cls(_he_normal(rng, (cout, cin, k, k)), K.BatchNormState.create(cout, beta=beta), stride, k // 2, relu)

    @property
    def spec(self) -> K.ConvSpec:
        cout, cin, kh, kw = self.weight.shape
        return K.ConvSpec(cin, cout, (kh, kw), self.stride, self.padding)

    def parameters(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bn.gamma": self.bn.gamma, f"{prefix}.bn.beta": self.bn.beta}

    def buffers(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.bn.running_mean": self.bn.running_mean, f"{prefix}.bn.running_var": self.bn.running_var}


def _he_normal(rng, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def convbn_forward(x, weight, bn, *, stride=1, padding=0, relu=True, phase="train", linearized=False):
    """conv -> BN -> (ReLU). Returns ``(out, cache, new_bn)``."""
    y, c_conv = K.conv2d(x, weight, None, stride, padding)
    z, c_bn, new_bn = K.batch_norm(y, bn, phase)
    if relu and not linearized:
        out, c_act = K.relu(z)
    else:
        out, c_act = z, None
    return out, (c_conv, c_bn, c_act), new_bn


def convbn_backward(cache, dout):
    """Return ``(d_input, d_weight, d_gamma, d_beta)``."""
    c_conv, c_bn, c_act = cache
    if c_act is not None:
        dout = K.relu_backward(c_act, dout)
    dz, dgamma, dbeta = K.batch_norm_backward(c_bn, dout)
    dx, dw, _ = K.conv2d_backward(c_conv, dz)
    return dx, dw, dgamma, dbeta


@dataclass
class GrclParams:
    """Parameters of one gated recurrent convolutional layer.

    With ``tie_weights`` the recurrent convolutions share one weight tensor
    each across steps (``a_weight``/``b_weight`` have length 1) while every
    step keeps its own batch-norm state.
    """

    T: int
    a0: ConvBN
    a_weight: list[np.ndarray]
    a_bn: list[K.BatchNormState]
    b_weight: list[np.ndarray]
    b_bn: list[K.BatchNormState]
    c_gate: ConvBN
    tie_weights: bool = True
    a_kernel: int = 3
    b_kernel: int = 1

    def __post_init__(self):
        if self.T < 0:
            raise ValueError(f"recursion depth T must be >= 0, got {self.T}")
        n_w = 1 if self.tie_weights else self.T
        if self.T and (len(self.a_weight) != n_w or len(self.b_weight) != n_w):
            raise ValueError(f"expected {n_w} recurrent weight sets, got {len(self.a_weight)}/{len(self.b_weight)}")
        if len(self.a_bn) != self.T or len(self.b_bn) != self.T:
            raise ValueError(f"expected {self.T} per-step batch-norm states")

    @property
    def in_channels(self) -> int:
        return self.a0.weight.shape[1]

    @property
    def channels(self) -> int:
        return self.a0.weight.shape[0]

    def step_weight(self, which: str, t: int) -> np.ndarray:
        ws = self.a_weight if which == "a" else self.b_weight
        return ws[0] if self.tie_weights else ws[t - 1]

    def _wname(self, which: str, i: int) -> str:
        base = "a_rec" if which == "a" else "b_rec"
        return f"{base}.weight" if self.tie_weights else f"{base}.{i + 1}.weight"

    def parameters(self, prefix: str = "") -> dict[str, np.ndarray]:
        p = f"{prefix}." if prefix else ""
        out = self.a0.parameters(f"{p}a0")
        for which, ws in (("a", self.a_weight), ("b", self.b_weight)):
            for i, w in enumerate(ws):
                out[p + self._wname(which, i)] = w
        for which, bns in (("a_rec", self.a_bn), ("b_rec", self.b_bn)):
            for t, bn in enumerate(bns, 1):
                out[f"{p}{which}.bn{t}.gamma"] = bn.gamma
                out[f"{p}{which}.bn{t}.beta"] = bn.beta
        out.update(self.c_gate.parameters(f"{p}c_gate"))
        return out

    def buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        p = f"{prefix}." if prefix else ""
        out = self.a0.buffers(f"{p}a0")
        for which, bns in (("a_rec", self.a_bn), ("b_rec", self.b_bn)):
            for t, bn in enumerate(bns, 1):
                out[f"{p}{which}.bn{t}.running_mean"] = bn.running_mean
                out[f"{p}{which}.bn{t}.running_var"] = bn.running_var
        out.update(self.c_gate.buffers(f"{p}c_gate"))
        return out

    def with_running_stats(self, stats: dict) -> GrclParams:
        """Copy of these params with batch-norm states replaced from ``stats``.

        ``stats`` is the ``"bn"`` entry of a forward cache.
        """
        return replace(
            self,
            a0=replace(self.a0, bn=stats["a0"]),
            c_gate=replace(self.c_gate, bn=stats.get("c_gate", self.c_gate.bn)),
            a_bn=list(stats["a_bn"]),
            b_bn=[stats["b_bn"].get(t, bn) for t, bn in enumerate(self.b_bn, 1)],
        )


def init_grcl(
    rng,
    in_channels: int,
    channels: int,
    T: int = 3,
    *,
    tie_weights: bool = True,
    a0_kernel: int = 3,
    a_kernel: int = 3,
    b_kernel: int = 1,
    c_kernel: int = 1,
) -> GrclParams:
    """He-initialized GRCL. Gate batch-norm betas start at 0 so gates open at ~0.5."""
    n_w = 1 if tie_weights else T
    if T == 0:
        n_w = 0
    a0 = ConvBN.create(rng, in_channels, channels, a0_kernel)
    a_w = [_he_normal(rng, (channels, channels, a_kernel, a_kernel)) for _ in range(n_w)]
    b_w = [_he_normal(rng, (channels, channels, b_kernel, b_kernel)) for _ in range(n_w)]
    c_gate = ConvBN.create(rng, in_channels, channels, c_kernel, relu=False, beta=0.0)
    return GrclParams(
        T=T,
        a0=a0,
        a_weight=a_w,
        a_bn=[K.BatchNormState.create(channels) for _ in range(T)],
        b_weight=b_w,
        b_bn=[K.BatchNormState.create(channels, beta=0.0) for _ in range(T)],
        c_gate=c_gate,
        tie_weights=tie_weights,
        a_kernel=a_kernel,
        b_kernel=b_kernel,
    )


def _check_step(t: int, x: np.ndarray, ref: np.ndarray):
    if x.shape != ref.shape:
        raise K.ShapeError(f"step {t}: recurrent operator produced {x.shape}, state is {ref.shape}")


def grcl_forward(u, params: GrclParams, mode=GateMode.LEARNED, phase: str = "train", *, linearized: bool = False):
    """Run the gated recursion on ``u``.

    Returns ``(x_T, cache)``. ``cache["bn"]`` holds the batch-norm states
    produced by this pass (updated running statistics in train phase).
    ``linearized`` swaps ReLU for identity (the sigmoid is kept: its
    derivative never vanishes); the receptive-field probe uses it.
    """
    mode = GateMode(mode)
    u = K.as_tensor(u)
    if u.shape[1] != params.in_channels:
        raise K.ShapeError(f"step 0: input has {u.shape[1]} channels, block expects {params.in_channels}")
    a0 = params.a0
    x, c_a0, bn_a0 = convbn_forward(
        u, a0.weight, a0.bn, stride=a0.stride, padding=a0.padding, phase=phase, linearized=linearized
    )
    gated = mode is GateMode.LEARNED
    cu = c_cu = None
    bn_c = params.c_gate.bn
    if gated:
        cg = params.c_gate
        cu, c_cu, bn_c = convbn_forward(
            u, cg.weight, cg.bn, stride=cg.stride, padding=cg.padding, relu=False, phase=phase
        )
        _check_step(0, cu, x)

    steps = []
    a_bn, b_bn = [], {}
    for t in range(1, params.T + 1):
        pad_a = params.a_kernel // 2
        a, c_a, nbn = convbn_forward(
            x, params.step_weight("a", t), params.a_bn[t - 1], padding=pad_a, phase=phase, linearized=linearized
        )
        a_bn.append(nbn)
        _check_step(t, a, x)
        c_b = s = None
        if gated:
            g, c_b, nbn = convbn_forward(
                x, params.step_weight("b", t), params.b_bn[t - 1], padding=params.b_kernel // 2, relu=False, phase=phase
            )
            b_bn[t] = nbn
            _check_step(t, g, x)
            s, _ = K.sigmoid(g + cu)
            x_next = x + s * a
        elif mode is GateMode.SATURATED_CLOSED:
            s = np.zeros_like(a)
            x_next = x + s * a
        else:
            # ablated and saturated_open both reduce to a plain residual step
            x_next = x + a
        steps.append((x, a, c_a, c_b, s))
        x = x_next
    cache = {
        "mode": mode,
        "params": params,
        "linearized": linearized,
        "a0": c_a0,
        "c_gate": c_cu,
        "steps": steps,
        "bn": {"a0": bn_a0, "c_gate": bn_c, "a_bn": a_bn, "b_bn": b_bn},
    }
    return x, cache


def grcl_backward(cache, d_xT):
    """Backpropagate through the recursion.

    Returns ``(d_u, grads)`` where ``grads`` maps the names used by
    :meth:`GrclParams.parameters` (unprefixed) to gradient arrays.
    """
    try:
        params: GrclParams = cache["params"]
        mode: GateMode = cache["mode"]
        steps = cache["steps"]
    except (TypeError, KeyError):
        raise K.ShapeError("grcl_backward: cache was not produced by grcl_forward") from None
    dx = np.asarray(d_xT, dtype=np.float64)
    if steps and dx.shape != steps[-1][0].shape:
        raise K.ShapeError(f"grcl_backward: d_xT {dx.shape} vs state {steps[-1][0].shape}")

    grads = {name: np.zeros_like(p) for name, p in params.parameters().items()}
    d_cu = None
    for t in range(params.T, 0, -1):
        x_prev, a, c_a, c_b, s = steps[t - 1]
        d_prev = dx.copy()
        if mode is GateMode.LEARNED:
            d_a = dx * s
            d_s = dx * a
            d_g = d_s * s * (1.0 - s)
            d_cu = d_g if d_cu is None else d_cu + d_g
            dxb, dwb, dgb, dbb = convbn_backward(c_b, d_g)
            d_prev += dxb
            grads[params._wname("b", 0 if params.tie_weights else t - 1)] += dwb
            grads[f"b_rec.bn{t}.gamma"] += dgb
            grads[f"b_rec.bn{t}.beta"] += dbb
        elif mode is GateMode.SATURATED_CLOSED:
            d_a = dx * s
        else:
            d_a = dx
        dxa, dwa, dga, dba = convbn_backward(c_a, d_a)
        d_prev += dxa
        grads[params._wname("a", 0 if params.tie_weights else t - 1)] += dwa
        grads[f"a_rec.bn{t}.gamma"] += dga
        grads[f"a_rec.bn{t}.beta"] += dba
        dx = d_prev

    d_u, dw, dg, db = convbn_backward(cache["a0"], dx)
    grads["a0.weight"] += dw
    grads["a0.bn.gamma"] += dg
    grads["a0.bn.beta"] += db
    if d_cu is not None:
        dxc, dwc, dgc, dbc = convbn_backward(cache["c_gate"], d_cu)
        d_u = d_u + dxc
        grads["c_gate.weight"] += dwc
        grads["c_gate.bn.gamma"] += dgc
        grads["c_gate.bn.beta"] += dbc
    return d_u, grads


def residual_chain(u, a0_weight, a0_bn, a_weights, a_bns, *, a0_padding=1, a_padding=1, phase="train"):
    """Ungated residual recursion ``x_t = x_{t-1} + A_t(x_{t-1})``.

    Takes only the ``A`` operators; gate parameters do not exist here. Used
    as an independent oracle for the ablated gate mode.
    """
    y, _ = K.conv2d(u, a0_weight, None, 1, a0_padding)
    y, _, _ = K.batch_norm(y, a0_bn, phase)
    x, _ = K.relu(y)
    for w, bn in zip(a_weights, a_bns):
        h, _ = K.conv2d(x, w, None, 1, a_padding)
        h, _, _ = K.batch_norm(h, bn, phase)
        h, _ = K.relu(h)
        x = x + h
    return x
