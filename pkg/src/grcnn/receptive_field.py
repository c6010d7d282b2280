"""Gradient-based receptive-field probe.

The probed model is replaced by a surrogate with strictly positive weights,
identity batch norm and linearized activations, then the gradient of one
output position is pulled back to the input. With no negative terms there
are no cancellations, so a pixel is in the support exactly when some path
connects it to the output.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, replace

import numpy as np

from . import kernels as K
from .grcl import ConvBN, GateMode, GrclParams, convbn_backward, convbn_forward, grcl_backward, grcl_forward
from .network import Network

__all__ = ["ProbeResult", "receptive_field_probe", "surrogate"]


@dataclass
class ProbeResult:
    support: np.ndarray  # (H, W) bool
    output_coord: tuple[int, int]

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        rows = np.flatnonzero(self.support.any(axis=1))
        cols = np.flatnonzero(self.support.any(axis=0))
        return int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1

    @property
    def extent(self) -> tuple[int, int]:
        y0, x0, y1, x1 = self.bbox
        return y1 - y0, x1 - x0

    @property
    def radius(self) -> float:
        """Half-width of the support's bounding box along its longer side."""
        return (max(self.extent) - 1) / 2


def _positive(w: np.ndarray) -> np.ndarray:
    fan_in = int(np.prod(w.shape[1:]))
    return np.full_like(w, 1.0 / fan_in)


def _identity_bn(bn: K.BatchNormState) -> K.BatchNormState:
    c = bn.channels
    return K.BatchNormState(np.ones(c), np.zeros(c), np.zeros(c), np.ones(c), bn.momentum, bn.eps)


def _sur_convbn(cb: ConvBN) -> ConvBN:
    return replace(cb, weight=_positive(cb.weight), bn=_identity_bn(cb.bn))


def surrogate(model):
    """Positive-weight, identity-normalized copy of a block, network or conv weight."""
    if isinstance(model, np.ndarray):
        return _positive(model)
    if isinstance(model, GrclParams):
        return replace(
            model,
            a0=_sur_convbn(model.a0),
            c_gate=_sur_convbn(model.c_gate),
            a_weight=[_positive(w) for w in model.a_weight],
            b_weight=[_positive(w) for w in model.b_weight],
            a_bn=[_identity_bn(b) for b in model.a_bn],
            b_bn=[_identity_bn(b) for b in model.b_bn],
        )
    if isinstance(model, Network):
        net = copy.copy(model)
        net.stem = [_sur_convbn(s) for s in model.stem]
        net.transitions = [None if t is None else _sur_convbn(t) for t in model.transitions]
        net.blocks = [surrogate(b) for b in model.blocks]
        return net
    raise TypeError(f"cannot probe object of type {type(model).__name__}")


def receptive_field_probe(model, input_shape, output_coord, *, mode=GateMode.LEARNED, padding=None) -> ProbeResult:
    """Input support of one output position.

    Parameters
    ----------
    model : GrclParams, Network, or a conv weight array ``(C_out, C_in, kh, kw)``
        For a network the probed output is the last GRCL feature map.
    input_shape : (H, W) or (C, H, W)
    output_coord : (row, col) in the model's output map
    padding : int, optional
        Only used for a bare conv weight; defaults to ``kh // 2``.
    """
    sur = surrogate(model)
    if isinstance(model, np.ndarray):
        cin = model.shape[1]
    elif isinstance(model, GrclParams):
        cin = model.in_channels
    else:
        cin = model.config.in_channels
    if len(input_shape) == 2:
        input_shape = (cin, *input_shape)
    u = np.ones((1, *input_shape))

    if isinstance(model, np.ndarray):
        pad = model.shape[2] // 2 if padding is None else padding
        out, cache = K.conv2d(u, sur, None, 1, pad)
        backward = lambda d: K.conv2d_backward(cache, d)[0]  # noqa: E731
    elif isinstance(model, GrclParams):
        out, cache = grcl_forward(u, sur, mode, "eval", linearized=True)
        backward = lambda d: grcl_backward(cache, d)[0]  # noqa: E731
    else:
        out, backward = _network_linearized(sur, u, mode)

    r, c = (int(v) for v in output_coord)
    if not (0 <= r < out.shape[2] and 0 <= c < out.shape[3]):
        raise ValueError(f"output_coord {output_coord} outside output map {out.shape[2:]}")
    d = np.zeros_like(out)
    d[0, :, r, c] = 1.0
    grad = backward(d)
    return ProbeResult(support=np.abs(grad[0]).sum(axis=0) > 0, output_coord=(r, c))


def _network_linearized(net: Network, u, mode):
    # stem and transitions as linear conv+affine maps, blocks linearized
    caches = []
    x = u
    for layer in net.stem:
        x, c, _ = convbn_forward(x, layer.weight, layer.bn, stride=layer.stride, padding=layer.padding,
                                 phase="eval", linearized=True)
        caches.append(("cb", c))
    for tr, blk in zip(net.transitions, net.blocks):
        if tr is not None:
            x, c, _ = convbn_forward(x, tr.weight, tr.bn, stride=tr.stride, padding=tr.padding,
                                     phase="eval", linearized=True)
            caches.append(("cb", c))
        x, c = grcl_forward(x, blk, mode, "eval", linearized=True)
        caches.append(("grcl", c))

    def backward(d):
        for kind, c in reversed(caches):
            d = convbn_backward(c, d)[0] if kind == "cb" else grcl_backward(c, d)[0]
        return d

    return x, backward
