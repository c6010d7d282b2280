"""GRCNN assembly: conv stem, four GRCL blocks, pooled linear readout."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import kernels as K
from .grcl import ConvBN, GateMode, GrclParams, convbn_backward, convbn_forward, grcl_backward, grcl_forward, init_grcl

__all__ = [
    "BlockConfig",
    "GrcnnConfig",
    "Network",
    "build_grcnn",
    "network_forward",
    "network_backward",
    "freeze",
    "PRESETS",
]


@dataclass(frozen=True)
class BlockConfig:
    channels: int
    T: int = 3
    downsample: bool = False


@dataclass(frozen=True)
class GrcnnConfig:
    """Architecture description.

    Between consecutive blocks a 1x1 projection (stride 2 when the next block
    has ``downsample`` set) maps channel counts. The stem is a stride-1 3x3
    conv followed by a stride-2 3x3 conv.
    """

    num_classes: int = 10
    in_channels: int = 3
    stem_channels: tuple[int, int] = (8, 8)
    blocks: tuple[BlockConfig, ...] = (
        BlockConfig(8, 3),
        BlockConfig(16, 3, True),
        BlockConfig(32, 3, True),
        BlockConfig(64, 3, True),
    )
    tie_weights: bool = True
    a_kernel: int = 3
    b_kernel: int = 1
    c_kernel: int = 1

    def __post_init__(self):
        blocks = tuple(b if isinstance(b, BlockConfig) else BlockConfig(**b) for b in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "stem_channels", tuple(self.stem_channels))
        if len(self.stem_channels) != 2:
            raise ValueError("stem needs exactly two conv layers")
        if not blocks:
            raise ValueError("at least one GRCL block is required")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> GrcnnConfig:
        d = dict(d)
        d["blocks"] = tuple(BlockConfig(**b) for b in d["blocks"])
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def with_T(self, T: int) -> GrcnnConfig:
        return replace(self, blocks=tuple(replace(b, T=T) for b in self.blocks))


def _paper(num_classes: int = 1000, **kw) -> GrcnnConfig:
    return GrcnnConfig(
        num_classes=num_classes,
        stem_channels=(64, 64),
        blocks=(BlockConfig(64, 3), BlockConfig(128, 3, True), BlockConfig(256, 3, True), BlockConfig(512, 3, True)),
        **kw,
    )


def _tiny(num_classes: int = 10, **kw) -> GrcnnConfig:
    return GrcnnConfig(
        num_classes=num_classes,
        stem_channels=(8, 8),
        blocks=(BlockConfig(8, 3), BlockConfig(16, 3, True), BlockConfig(32, 3, True), BlockConfig(64, 3, True)),
        **kw,
    )


PRESETS = {"paper": _paper, "tiny": _tiny}


@dataclass
class Network:
    """Network parameters plus the freeze mask.

    ``frozen`` holds parameter names the optimizer must leave untouched.
    """

    config: GrcnnConfig
    stem: list[ConvBN]
    blocks: list[GrclParams]
    transitions: list[ConvBN | None]
    fc_weight: np.ndarray
    fc_bias: np.ndarray
    frozen: frozenset = field(default_factory=frozenset)

    def _layers(self):
        for i, s in enumerate(self.stem, 1):
            yield f"stem{i}", s
        for i, (tr, blk) in enumerate(zip(self.transitions, self.blocks), 1):
            if tr is not None:
                yield f"trans{i}", tr
            yield f"grcl{i}", blk

    def parameters(self) -> dict[str, np.ndarray]:
        """Name -> array, in a fixed order. Arrays are the live storage."""
        out = {}
        for name, layer in self._layers():
            out.update(layer.parameters(name))
        out["fc.weight"] = self.fc_weight
        out["fc.bias"] = self.fc_bias
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self._layers():
            out.update(layer.buffers(name))
        return out

    def trainable(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.parameters().items() if k not in self.frozen}

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {**self.parameters(), **self.buffers()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        """Copy values into this network's storage; shapes must match exactly."""
        own = self.state_arrays()
        missing = set(own) - set(arrays)
        extra = set(arrays) - set(own)
        if missing or extra:
            raise K.ShapeError(f"state mismatch: missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}")
        for name, arr in arrays.items():
            if own[name].shape != np.shape(arr):
                raise K.ShapeError(f"{name}: stored shape {np.shape(arr)} vs network {own[name].shape}")
        for name, arr in arrays.items():
            own[name][...] = arr

    def commit(self, cache):
        """Adopt the running statistics produced by a train-phase forward.

        Layers whose parameters are all frozen keep their statistics.
        """
        stats = cache["bn"]

        def is_frozen(prefix):
            names = [n for n in self.parameters() if n.startswith(prefix + ".")]
            return bool(names) and all(n in self.frozen for n in names)

        for i, bn in enumerate(stats["stem"]):
            if not is_frozen(f"stem{i + 1}"):
                self.stem[i] = replace(self.stem[i], bn=bn)
        for i, bn in enumerate(stats["trans"]):
            if bn is not None and not is_frozen(f"trans{i + 1}"):
                self.transitions[i] = replace(self.transitions[i], bn=bn)
        for i, st in enumerate(stats["grcl"]):
            if not is_frozen(f"grcl{i + 1}"):
                self.blocks[i] = self.blocks[i].with_running_stats(st)

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters().values()))


def build_grcnn(config: GrcnnConfig, rng=None) -> Network:
    """Initialize a network. Same seed gives bitwise-identical parameters."""
    rng = np.random.default_rng(rng)
    c1, c2 = config.stem_channels
    stem = [
        ConvBN.create(rng, config.in_channels, c1, 3, stride=1),
        ConvBN.create(rng, c1, c2, 3, stride=2),
    ]
    blocks, transitions = [], []
    prev = c2
    for i, b in enumerate(config.blocks):
        if b.downsample or b.channels != prev:
            if i == 0 and b.downsample:
                raise ValueError("first block cannot downsample; the stem already does")
            transitions.append(ConvBN.create(rng, prev, b.channels, 1, stride=2 if b.downsample else 1))
        else:
            transitions.append(None)
        blocks.append(
            init_grcl(
                rng,
                b.channels,
                b.channels,
                b.T,
                tie_weights=config.tie_weights,
                a_kernel=config.a_kernel,
                b_kernel=config.b_kernel,
                c_kernel=config.c_kernel,
            )
        )
        prev = b.channels
    fc_weight = rng.standard_normal((config.num_classes, prev)) * np.sqrt(1.0 / prev)
    return Network(config, stem, blocks, transitions, fc_weight, np.zeros(config.num_classes))


def _cb(layer: ConvBN, x, phase, relu=None):
    return convbn_forward(
        x, layer.weight, layer.bn, stride=layer.stride, padding=layer.padding,
        relu=layer.relu if relu is None else relu, phase=phase,
    )


def network_forward(net: Network, batch, phase: str = "train", mode=GateMode.LEARNED, *, upto: int | None = None):
    """Logits for a batch ``(N, C, H, W)``.

    Returns ``(logits, cache)``. ``upto`` stops after that many GRCL blocks and
    returns the feature map instead of logits.
    """
    x = K.as_tensor(batch)
    if x.shape[1] != net.config.in_channels:
        raise K.ShapeError(f"channels: batch has {x.shape[1]}, network expects {net.config.in_channels}")
    caches = {"stem": [], "trans": [], "grcl": []}
    stats = {"stem": [], "trans": [], "grcl": []}
    for layer in net.stem:
        x, c, bn = _cb(layer, x, phase)
        caches["stem"].append(c)
        stats["stem"].append(bn)
    n_blocks = len(net.blocks) if upto is None else upto
    for tr, blk in list(zip(net.transitions, net.blocks))[:n_blocks]:
        if tr is not None:
            x, c, bn = _cb(tr, x, phase)
        else:
            c = bn = None
        caches["trans"].append(c)
        stats["trans"].append(bn)
        x, c = grcl_forward(x, blk, mode, phase)
        caches["grcl"].append(c)
        stats["grcl"].append(c["bn"])
    cache = {"layers": caches, "bn": stats, "upto": upto}
    if upto is not None:
        return x, cache
    pooled, c_pool = K.global_avg_pool(x)
    logits, c_fc = K.linear(pooled, net.fc_weight, net.fc_bias)
    cache["pool"] = c_pool
    cache["fc"] = c_fc
    return logits, cache


def network_backward(net: Network, cache, d_logits):
    """Gradients for every parameter name of ``net.parameters()``.

    Also returns the gradient with respect to the input batch.
    """
    if "fc" not in cache:
        raise K.ShapeError("network_backward needs a full forward cache (upto=None)")
    grads = {}
    d_pooled, grads["fc.weight"], grads["fc.bias"] = K.linear_backward(cache["fc"], np.asarray(d_logits, dtype=np.float64))
    dx = K.global_avg_pool_backward(cache["pool"], d_pooled)
    layers = cache["layers"]
    for i in range(len(layers["grcl"]) - 1, -1, -1):
        dx, g = grcl_backward(layers["grcl"][i], dx)
        grads.update({f"grcl{i + 1}.{k}": v for k, v in g.items()})
        if layers["trans"][i] is not None:
            dx, dw, dg, db = convbn_backward(layers["trans"][i], dx)
            grads.update({f"trans{i + 1}.weight": dw, f"trans{i + 1}.bn.gamma": dg, f"trans{i + 1}.bn.beta": db})
    for i in range(len(layers["stem"]) - 1, -1, -1):
        dx, dw, dg, db = convbn_backward(layers["stem"][i], dx)
        grads.update({f"stem{i + 1}.weight": dw, f"stem{i + 1}.bn.gamma": dg, f"stem{i + 1}.bn.beta": db})
    return {k: grads[k] for k in net.parameters()}, dx


def freeze(net: Network, selector) -> Network:
    """Make only the selected GRCL blocks trainable (1-based indices).

    ``selector`` may also be ``"all"`` (nothing frozen) or contain the group
    names ``"stem"``, ``"trans"`` and ``"fc"``. The mask is set in place and
    ``net`` is returned.
    """
    names = list(net.parameters())
    if selector == "all" or selector is None:
        net.frozen = frozenset()
        return net
    if isinstance(selector, (int, str)):
        selector = [selector]
    prefixes = []
    for s in selector:
        if isinstance(s, str) and not s.isdigit():
            if s not in ("stem", "trans", "fc"):
                raise ValueError(f"unknown parameter group {s!r}")
            prefixes.append(s)
            continue
        i = int(s)
        if not 1 <= i <= len(net.blocks):
            raise ValueError(f"block index {i} out of range 1..{len(net.blocks)}")
        prefixes.append(f"grcl{i}.")
    trainable = {n for n in names if any(n.startswith(p) for p in prefixes)}
    net.frozen = frozenset(n for n in names if n not in trainable)
    return net
