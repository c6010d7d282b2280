"""SGD training loop, staged fine-tuning and evaluation.

Randomness is split in two. A trainer-level generator (saved in checkpoints)
drives the epoch shuffle and per-batch decisions; every sample's augmentation
draws come from ``SeedSequence([seed, epoch, sample_index])`` so the batch
stream does not depend on how samples are grouped or prefetched.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import kernels as K
from .augment import AugmixConfig, augmix, blend, cutmix_batch, fit_overlay
from .data import Dataset
from .network import Network, freeze, network_backward, network_forward
from .objectives import LossWeights, SuperclassMap, superclass_project, total_loss

log = logging.getLogger(__name__)

__all__ = [
    "ConfigError",
    "DivergenceError",
    "OptimizerState",
    "TrainConfig",
    "TrainState",
    "sgd_momentum_step",
    "train_epoch",
    "finetune_stage",
    "evaluate",
    "run_training",
]

STAGES = ("pretrain", "finetune_v1", "finetune_v2")
STAGE_BLOCK = {"finetune_v1": 1, "finetune_v2": 2}
DIVERGENCE_LIMIT = 1e4


class ConfigError(ValueError):
    """Invalid or incomplete run configuration."""


class DivergenceError(RuntimeError):
    def __init__(self, message, last_good=None):
        super().__init__(message if last_good is None else f"{message} (last good checkpoint: {last_good})")
        self.last_good = last_good


# --------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")

    def hyper(self) -> dict:
        return {"lr": self.lr, "momentum": self.momentum, "weight_decay": self.weight_decay}


def sgd_momentum_step(params: dict, grads: dict, state: OptimizerState, frozen=frozenset()):
    """One heavy-ball step, in place: ``v = mu*v + g + wd*p``, ``p -= lr*v``.

    Frozen names are skipped entirely (no buffer is created for them). All
    gradients are checked before anything is modified.
    """
    names = [n for n in params if n not in frozen]
    for n in names:
        if n not in grads:
            raise KeyError(f"no gradient for parameter {n}")
        g = grads[n]
        if np.shape(g) != params[n].shape:
            raise K.ShapeError(f"{n}: gradient shape {np.shape(g)} vs parameter {params[n].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {n}")
    for n in names:
        p = params[n]
        v = state.buffers.get(n)
        if v is None:
            v = state.buffers[n] = np.zeros_like(p)
        v *= state.momentum
        v += grads[n]
        if state.weight_decay:
            v += state.weight_decay * p
        p -= state.lr * v
    return params, state


# --------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    epochs: int = 12
    batch_size: int = 64
    seed: int = 0
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_milestones: tuple[float, ...] = (0.5, 0.75)  # fractions of ``epochs``
    lr_gamma: float = 0.1
    w_main: float = 1.0
    w_js: float = 12.0
    w_super: float = 0.5
    cutmix: bool = False
    cutmix_prob: float = 0.5
    augmix: bool = False
    augmix_width: int = 3
    augmix_depth: int = 3
    augmix_magnitude: float = 0.5
    stage: str = "pretrain"
    p_blend: float = 0.5
    alpha_low: float = 0.2
    alpha_high: float = 0.6
    data_dir: str | None = None
    test_dir: str | None = None
    texture_dir: str | None = None
    noise_dir: str | None = None
    superclass_map: str | None = None
    superclass_reference: str | None = None
    checkpoint_every: int = 1

    def __post_init__(self):
        self.lr_milestones = tuple(self.lr_milestones)
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.cutmix_prob <= 1.0 or not 0.0 <= self.p_blend <= 1.0:
            raise ConfigError("probabilities must lie in [0, 1]")
        if not 0.0 <= self.alpha_low <= self.alpha_high <= 1.0:
            raise ConfigError("blend alpha range must satisfy 0 <= low <= high <= 1")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.w_main, self.w_js, self.w_super)

    @property
    def augmix_config(self) -> AugmixConfig:
        return AugmixConfig(self.augmix_width, self.augmix_depth, self.augmix_magnitude)

    def lr_at(self, epoch: int) -> float:
        drops = sum(epoch >= int(round(m * self.epochs)) for m in self.lr_milestones)
        return self.lr * self.lr_gamma**drops

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown trainer keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainState:
    """Everything a checkpoint must restore to continue a run bitwise."""

    net: Network
    opt: OptimizerState
    rng: np.random.Generator
    epoch: int = 0

    @classmethod
    def fresh(cls, net: Network, cfg: TrainConfig) -> TrainState:
        opt = OptimizerState(cfg.lr, cfg.momentum, cfg.weight_decay)
        return cls(net, opt, np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xC0FFEE])))


# --------------------------------------------------------------------------
# per-sample pipeline


def _sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, int(index)]))


def _blend_sample(x, rng, cfg: TrainConfig, pools: list[list[np.ndarray]]):
    if cfg.p_blend <= 0.0 or rng.random() >= cfg.p_blend:
        return x
    pool = pools[int(rng.integers(len(pools)))]
    overlay = fit_overlay(pool[int(rng.integers(len(pool)))], x.shape[-2], x.shape[-1], rng)
    return blend(x, overlay, float(rng.uniform(cfg.alpha_low, cfg.alpha_high)))


def _prepare_batch(dataset: Dataset, idx, cfg: TrainConfig, epoch: int, batch_rng, pools):
    x = dataset.images[idx].astype(np.float64, copy=True)
    y = dataset.one_hot(idx)
    rngs = [_sample_rng(cfg.seed, epoch, i) for i in idx]
    if pools:
        for j, r in enumerate(rngs):
            x[j] = _blend_sample(x[j], r, cfg, pools)
    if cfg.cutmix and batch_rng.random() < cfg.cutmix_prob:
        x, y = cutmix_batch(x, y, batch_rng)
    if not cfg.augmix:
        return x, y, None
    acfg = cfg.augmix_config
    a1, a2 = np.empty_like(x), np.empty_like(x)
    for j, r in enumerate(rngs):
        t = augmix(x[j], acfg, r)
        a1[j], a2[j] = t.aug1, t.aug2
    return x, y, (a1, a2)


# --------------------------------------------------------------------------
# loops


def train_epoch(state: TrainState, dataset: Dataset, cfg: TrainConfig, *, smap: SuperclassMap | None = None,
                pools=None, last_good=None) -> dict:
    """One pass over ``dataset``; advances ``state.epoch``.

    Returns mean loss components, running accuracy against the pre-mix
    labels, and the learning rate used.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    if cfg.batch_size > n:
        raise ConfigError(f"batch_size {cfg.batch_size} exceeds dataset size {n}")
    net, opt, rng = state.net, state.opt, state.rng
    if not net.trainable():
        raise ConfigError("every parameter is frozen; nothing to train")
    epoch = state.epoch
    opt.lr = cfg.lr_at(epoch)
    weights = cfg.loss_weights
    order = rng.permutation(n)
    sums = {"loss": 0.0, "ce": 0.0, "js": 0.0, "super": 0.0}
    correct = 0
    seen = 0
    t0 = time.perf_counter()
    for start in range(0, n, cfg.batch_size):
        idx = order[start : start + cfg.batch_size]
        x, y, aug = _prepare_batch(dataset, idx, cfg, epoch, rng, pools)
        b = len(idx)
        batch = x if aug is None else np.concatenate([x, aug[0], aug[1]])
        logits, cache = network_forward(net, batch, "train")
        clean = logits[:b]
        aug_logits = None if aug is None else (logits[b : 2 * b], logits[2 * b :])
        loss, comps, grads = total_loss(clean, y, weights, aug_logits, smap)
        if not np.isfinite(loss) or loss > DIVERGENCE_LIMIT:
            raise DivergenceError(f"loss diverged to {loss} at epoch {epoch}, batch {start // cfg.batch_size}", last_good)
        d = grads["clean"] if aug is None else np.concatenate([grads["clean"], grads["aug1"], grads["aug2"]])
        pgrads, _ = network_backward(net, cache, d)
        sgd_momentum_step(net.parameters(), pgrads, opt, net.frozen)
        net.commit(cache)
        sums["loss"] += loss * b
        for k in ("ce", "js", "super"):
            sums[k] += comps[k] * b
        correct += int(np.sum(np.argmax(clean, axis=1) == dataset.labels[idx]))
        seen += b
    state.epoch += 1
    out = {k: v / seen for k, v in sums.items()}
    out.update(epoch=epoch, lr=opt.lr, train_running_acc=correct / seen, seconds=time.perf_counter() - t0)
    return out


def evaluate(net: Network, dataset: Dataset, smap: SuperclassMap | None = None, batch_size: int = 250) -> dict:
    """Eval-phase accuracy and mean cross-entropy; never mutates ``net``."""
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = np.concatenate([
        network_forward(net, dataset.images[s : s + batch_size], "eval")[0] for s in range(0, n, batch_size)
    ])
    loss, _ = K.softmax_cross_entropy(logits, dataset.one_hot())
    pred = np.argmax(logits, axis=1)
    out = {"accuracy": float(np.mean(pred == dataset.labels)), "loss": float(loss), "n": n}
    if smap is not None:
        true_s = smap.class_to_super[dataset.labels]
        ok = true_s >= 0
        if ok.any():
            proj = superclass_project(K.softmax(logits[ok]), smap)
            hit = np.argmax(proj, axis=1) == true_s[ok]
            out["superclass_accuracy"] = float(hit.mean())
            out["per_superclass_accuracy"] = {
                int(s): float(hit[true_s[ok] == s].mean()) for s in np.unique(true_s[ok])
            }
    return out


def _stage_pools(cfg: TrainConfig, textures, noise):
    if cfg.stage == "finetune_v1":
        if not textures or not noise:
            raise ConfigError("finetune_v1 needs non-empty texture and noise pools")
        return [textures, noise]
    if cfg.stage == "finetune_v2":
        if not textures:
            raise ConfigError("finetune_v2 needs a non-empty texture pool")
        return [textures]
    return None


def finetune_stage(state: TrainState, dataset: Dataset, cfg: TrainConfig, *, textures=None, noise=None,
                   smap=None, epochs: int | None = None, on_epoch=None) -> list[dict]:
    """Train only the GRCL block of the stage on overlay-blended inputs.

    ``textures``/``noise`` are lists of 2-D grayscale overlays. With
    ``p_blend == 0`` the pools are validated but never sampled.
    """
    if cfg.stage not in STAGE_BLOCK:
        raise ConfigError(f"finetune_stage needs a finetune stage, got {cfg.stage!r}")
    pools = _stage_pools(cfg, textures, noise)
    freeze(state.net, [STAGE_BLOCK[cfg.stage]])
    history = []
    for _ in range(cfg.epochs if epochs is None else epochs):
        m = train_epoch(state, dataset, cfg, smap=smap, pools=pools)
        history.append(m)
        if on_epoch is not None:
            on_epoch(state, m)
    return history


def run_training(state: TrainState, train: Dataset, cfg: TrainConfig, *, test: Dataset | None = None,
                 smap=None, pools=None, metrics_path=None, checkpoint_dir=None, until_epoch=None) -> list[dict]:
    """Train from ``state.epoch`` to ``until_epoch`` (default ``cfg.epochs``).

    Appends one JSON line per epoch to ``metrics_path`` and writes
    ``checkpoint_dir/last.ckpt`` every ``checkpoint_every`` epochs.
    """
    from .checkpoint import save_checkpoint

    stop = cfg.epochs if until_epoch is None else until_epoch
    history = []
    last_good = None
    while state.epoch < stop:
        m = train_epoch(state, train, cfg, smap=smap, pools=pools, last_good=last_good)
        if test is not None:
            m["test_accuracy"] = evaluate(state.net, test, smap)["accuracy"]
        history.append(m)
        log.info("epoch %d: %s", m["epoch"], {k: round(v, 4) if isinstance(v, float) else v for k, v in m.items()})
        if metrics_path is not None:
            with open(metrics_path, "a") as fh:
                fh.write(json.dumps(_jsonable(m), sort_keys=True) + "\n")
        if checkpoint_dir is not None and cfg.checkpoint_every and (
            state.epoch % cfg.checkpoint_every == 0 or state.epoch == stop
        ):
            last_good = Path(checkpoint_dir) / "last.ckpt"
            save_checkpoint(state, last_good, extra={"train": cfg.to_dict()})
    return history


def _jsonable(m: dict) -> dict:
    # timing is excluded so metric logs are byte-identical across reruns
    return {k: v for k, v in m.items() if k != "seconds"}


def with_stage(cfg: TrainConfig, stage: str) -> TrainConfig:
    return replace(cfg, stage=stage)
