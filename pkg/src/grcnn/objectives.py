"""Composite training losses: cross-entropy, Jensen-Shannon consistency and
the superclass regularizer. Every loss returns its value together with
exact gradients."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels as K

LOG_FLOOR = 1e-12
N_SUPERCLASSES = 11
UNMAPPED = -1

__all__ = [
    "LossWeights",
    "SuperclassMap",
    "js_consistency",
    "superclass_project",
    "superclass_project_backward",
    "superclass_loss",
    "softmax_backward",
    "total_loss",
    "toy_superclass_map",
]


@dataclass(frozen=True)
class LossWeights:
    w_main: float = 1.0
    w_js: float = 12.0
    w_super: float = 0.5

    def __post_init__(self):
        if min(self.w_main, self.w_js, self.w_super) < 0:
            raise ValueError("loss weights must be non-negative")


def _flog(p):
    return np.log(np.maximum(p, LOG_FLOOR))


def _flog_grad(p):
    # derivative of log(max(p, floor)); zero where the floor is active
    return np.where(p > LOG_FLOOR, 1.0 / np.where(p > LOG_FLOOR, p, 1.0), 0.0)


def js_consistency(p_clean, p_aug1, p_aug2):
    """Mean three-way Jensen-Shannon divergence and gradients for each input.

    Returns ``(loss, (d_clean, d_aug1, d_aug2))``. ``0 * log 0`` counts as 0.
    """
    ps = [K.check_distribution(p, f"p[{i}]") for i, p in enumerate((p_clean, p_aug1, p_aug2))]
    if not (ps[0].shape == ps[1].shape == ps[2].shape):
        raise K.ShapeError(f"js_consistency: shapes {[p.shape for p in ps]} differ")
    n = ps[0].shape[0]
    m = (ps[0] + ps[1] + ps[2]) / 3.0
    # the average of three equal floats can round away from them; keep it exact
    m = np.where((ps[0] == ps[1]) & (ps[1] == ps[2]), ps[0], m)
    log_m = _flog(m)
    loss = 0.0
    for p in ps:
        loss += float(np.sum(p * (_flog(p) - log_m)))
    loss /= 3.0 * n
    # d/dp_i of (1/3n) sum_j sum_k p_jk (log p_jk - log m_k), with m depending on p_i
    inner = sum(p for p in ps) * _flog_grad(m) / 3.0
    grads = []
    for p in ps:
        g = _flog(p) + p * _flog_grad(p) - log_m - inner
        grads.append(g / (3.0 * n))
    return loss, tuple(grads)


@dataclass
class SuperclassMap:
    """Class -> superclass assignment plus an optional human reference.

    ``reference`` is an ``(11, 11)`` matrix: row ``s`` is the human response
    distribution over superclasses for images whose true superclass is ``s``.
    """

    class_to_super: np.ndarray
    reference: np.ndarray | None = None
    complete: bool = False

    def __post_init__(self):
        self.class_to_super = np.asarray(self.class_to_super, dtype=int)
        bad = (self.class_to_super < UNMAPPED) | (self.class_to_super >= N_SUPERCLASSES)
        if bad.any():
            raise ValueError(f"class {int(np.flatnonzero(bad)[0])} maps outside 0..10 / -1")
        if self.complete:
            missing = set(range(N_SUPERCLASSES)) - set(self.class_to_super.tolist())
            if missing:
                raise ValueError(f"map declared complete but superclasses {sorted(missing)} are empty")
        if self.reference is not None:
            ref = np.atleast_2d(np.asarray(self.reference, dtype=np.float64))
            if ref.shape[1] != N_SUPERCLASSES:
                raise K.ShapeError(f"reference needs {N_SUPERCLASSES} columns, got {ref.shape[1]}")
            K.check_distribution(ref, "reference")
            if ref.shape[0] == 1:
                ref = np.repeat(ref, N_SUPERCLASSES, axis=0)
            self.reference = ref

    @property
    def num_classes(self) -> int:
        return self.class_to_super.shape[0]

    @property
    def assignment(self) -> np.ndarray:
        """``(K, 11)`` 0/1 matrix; unmapped classes are all-zero rows."""
        a = np.zeros((self.num_classes, N_SUPERCLASSES))
        mapped = self.class_to_super >= 0
        a[np.flatnonzero(mapped), self.class_to_super[mapped]] = 1.0
        return a

    def target_for(self, labels) -> tuple[np.ndarray, np.ndarray]:
        """Reference rows for (soft) class labels.

        Returns ``(targets, valid)``; samples with no mass on mapped classes
        are marked invalid.
        """
        if self.reference is None:
            raise ValueError("superclass map has no reference distribution")
        y = np.atleast_2d(np.asarray(labels, dtype=np.float64))
        w = y @ self.assignment  # label mass per true superclass
        total = w.sum(axis=1)
        valid = total > 1e-12
        targets = np.full((y.shape[0], N_SUPERCLASSES), 1.0 / N_SUPERCLASSES)
        targets[valid] = (w[valid] / total[valid, None]) @ self.reference
        return targets, valid

    @classmethod
    def from_files(cls, map_path, reference_path=None) -> SuperclassMap:
        """Read ``class<TAB>superclass`` lines and an optional 11-column reference file."""
        pairs = []
        for ln, line in enumerate(Path(map_path).read_text().splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{map_path}:{ln}: expected 'class<TAB>superclass'")
            pairs.append((int(parts[0]), int(parts[1])))
        if not pairs:
            raise ValueError(f"{map_path}: no entries")
        k = max(c for c, _ in pairs) + 1
        c2s = np.full(k, UNMAPPED)
        for c, s in pairs:
            c2s[c] = s
        ref = np.loadtxt(reference_path, delimiter="\t", ndmin=2) if reference_path else None
        return cls(c2s, ref)

    def to_files(self, map_path, reference_path=None):
        Path(map_path).write_text("".join(f"{c}\t{s}\n" for c, s in enumerate(self.class_to_super)))
        if reference_path is not None and self.reference is not None:
            np.savetxt(reference_path, self.reference, delimiter="\t", fmt="%.17g")


def toy_superclass_map(num_classes: int = 20, seed: int = 0) -> SuperclassMap:
    """Complete map for ``num_classes >= 11`` classes with a smoothed-diagonal reference."""
    rng = np.random.default_rng(seed)
    c2s = np.concatenate([np.arange(N_SUPERCLASSES), rng.integers(0, N_SUPERCLASSES, num_classes - N_SUPERCLASSES)])
    ref = 0.7 * np.eye(N_SUPERCLASSES) + 0.3 * rng.dirichlet(np.ones(N_SUPERCLASSES), N_SUPERCLASSES)
    return SuperclassMap(c2s, ref, complete=True)


def superclass_project(probs, smap: SuperclassMap):
    """Sum class probabilities per superclass and renormalize over mapped mass.

    Unmapped mass is dropped; if less than 1e-9 remains the uniform
    11-vector is returned. Accepts ``(K,)`` or ``(N, K)``.
    """
    p = np.asarray(probs, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    if p.shape[1] != smap.num_classes:
        raise K.ShapeError(f"probs have {p.shape[1]} classes, map has {smap.num_classes}")
    raw = p @ smap.assignment
    mass = raw.sum(axis=1, keepdims=True)
    ok = mass[:, 0] >= 1e-9
    out = np.full_like(raw, 1.0 / N_SUPERCLASSES)
    out[ok] = raw[ok] / mass[ok]
    return out[0] if single else out


def superclass_project_backward(probs, smap: SuperclassMap, d_projected):
    """Pull a gradient on the projected 11-vectors back to class probabilities."""
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    a = smap.assignment
    raw = p @ a
    mass = raw.sum(axis=1, keepdims=True)
    ok = mass[:, 0] >= 1e-9
    d = np.atleast_2d(d_projected)
    s = np.where(ok[:, None], raw / np.where(ok[:, None], mass, 1.0), 0.0)
    # dS_j/dp_k = (A_kj - S_j * mapped_k) / mass
    mapped = a.sum(axis=1)
    dp = (d @ a.T - (d * s).sum(axis=1, keepdims=True) * mapped[None, :]) / np.where(ok[:, None], mass, 1.0)
    dp[~ok] = 0.0
    return dp


def superclass_loss(projected, reference):
    """Mean cross-entropy ``-sum ref * log projected`` and its gradient."""
    q = K.check_distribution(projected, "projected")
    r = K.check_distribution(reference, "reference")
    if q.shape != r.shape:
        raise K.ShapeError(f"superclass_loss: {q.shape} vs {r.shape}")
    n = q.shape[0]
    loss = -float(np.sum(r * _flog(q))) / n
    return loss, -r * _flog_grad(q) / n


def softmax_backward(probs, d_probs):
    """Gradient w.r.t. logits given a gradient w.r.t. ``softmax(logits)``."""
    return probs * (d_probs - np.sum(probs * d_probs, axis=1, keepdims=True))


def total_loss(logits, labels, weights: LossWeights = LossWeights(), aug_logits=None, smap: SuperclassMap | None = None):
    """Weighted sum of the three objectives.

    Parameters
    ----------
    logits : (N, K) clean-image logits
    labels : (N, K) soft labels
    aug_logits : pair of (N, K) logits for the two AugMix views, or None
    smap : superclass map with reference; the superclass term is skipped without one

    Returns
    -------
    loss : float
    components : dict with unweighted ``ce``, ``js``, ``super`` values
    grads : dict with ``clean`` and, when augmented views are given,
        ``aug1``/``aug2`` logit gradients
    """
    logits = np.asarray(logits, dtype=np.float64)
    ce, d_clean = K.softmax_cross_entropy(logits, labels)
    d_clean = weights.w_main * d_clean
    comps = {"ce": ce, "js": 0.0, "super": 0.0}
    grads = {"clean": d_clean}
    p_clean = K.softmax(logits)

    if aug_logits is not None:
        p1, p2 = K.softmax(aug_logits[0]), K.softmax(aug_logits[1])
        js, (g0, g1, g2) = js_consistency(p_clean, p1, p2)
        comps["js"] = js
        grads["clean"] = grads["clean"] + weights.w_js * softmax_backward(p_clean, g0)
        grads["aug1"] = weights.w_js * softmax_backward(p1, g1)
        grads["aug2"] = weights.w_js * softmax_backward(p2, g2)

    if smap is not None and smap.reference is not None:
        targets, valid = smap.target_for(labels)
        if valid.any():
            pv = p_clean[valid]
            proj = superclass_project(pv, smap)
            sl, d_proj = superclass_loss(proj, targets[valid])
            comps["super"] = sl
            d_p = superclass_project_backward(pv, smap, d_proj)
            g = np.zeros_like(logits)
            g[valid] = softmax_backward(pv, d_p)
            # superclass loss averages over valid rows only
            grads["clean"] = grads["clean"] + weights.w_super * g

    loss = weights.w_main * ce + weights.w_js * comps["js"] + weights.w_super * comps["super"]
    return loss, comps, grads
