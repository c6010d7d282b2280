"""Finite-difference verification of every hand-written backward pass.

Coordinates whose central-difference stencil flips the sign of any ReLU
input are rejected and redrawn: the loss is not differentiable across such
a stencil, so the difference quotient measures the kink rather than the
gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from .grcl import GateMode, grcl_backward, grcl_forward, init_grcl
from .network import PRESETS, build_grcnn, network_backward, network_forward

TOLERANCES = {"kernel": 1e-5, "grcl": 1e-5, "network": 1e-4}
EPS = 1e-4


def relative_error(analytic, numeric, floor: float = 1e-7) -> float:
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))


@dataclass
class GroupResult:
    max_rel_error: float = 0.0
    checked: int = 0
    rejected: int = 0

    def update(self, err: float, checked: int, rejected: int):
        self.max_rel_error = max(self.max_rel_error, err)
        self.checked += checked
        self.rejected += rejected


@dataclass
class GradCheckReport:
    scope: str
    tolerance: float
    seeds: list[int]
    groups: dict[str, GroupResult] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max((g.max_rel_error for g in self.groups.values()), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance and all(g.checked > 0 for g in self.groups.values())

    def add(self, name: str, err: float, checked: int, rejected: int = 0):
        self.groups.setdefault(name, GroupResult()).update(err, checked, rejected)

    def lines(self) -> list[str]:
        out = [f"scope={self.scope} tolerance={self.tolerance:g} eps={EPS:g} seeds={self.seeds}"]
        for name, g in self.groups.items():
            flag = "ok" if g.max_rel_error < self.tolerance and g.checked else "FAIL"
            out.append(f"{name}\t{g.max_rel_error:.3e}\tchecked={g.checked}\trejected={g.rejected}\t{flag}")
        out.append(f"max_rel_error={self.max_error:.3e} {'PASS' if self.passed else 'FAIL'}")
        return out


def check_coordinates(loss, param, analytic, rng, n_coords=None, eps=EPS, kink_aware=True, max_tries=None):
    """Compare ``analytic`` against central differences of ``loss()`` in ``param``.

    ``loss`` reads ``param`` (perturbed in place). Returns
    ``(rel_error, n_checked, n_rejected)``.
    """
    flat = param.reshape(-1)
    size = flat.size
    if n_coords is None or n_coords >= size:
        candidates = np.arange(size)
    else:
        candidates = rng.permutation(size)
    limit = len(candidates) if n_coords is None else n_coords
    max_tries = max_tries or max(4 * limit, 16)
    base_signs = _signs(loss)[1] if kink_aware else None
    kept, numeric, rejected = [], [], 0
    for i in candidates[:max_tries]:
        if len(kept) >= limit:
            break
        orig = flat[i]
        flat[i] = orig + eps
        fp, sp = _signs(loss) if kink_aware else (float(loss()), None)
        flat[i] = orig - eps
        fm, sm = _signs(loss) if kink_aware else (float(loss()), None)
        flat[i] = orig
        if kink_aware and not (_same(sp, base_signs) and _same(sm, base_signs)):
            rejected += 1
            continue
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite loss at coordinate {i}")
        kept.append(i)
        numeric.append((fp - fm) / (2 * eps))
    if not kept:
        return 0.0, 0, rejected
    a = np.asarray(analytic).reshape(-1)[kept]
    return relative_error(a, numeric), len(kept), rejected


def _signs(loss):
    with K.record_relu_signs() as log:
        value = float(loss())
    return value, log


def _same(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


# --------------------------------------------------------------------------
# suites


def kernel_suite(seed: int, report: GradCheckReport):
    rng = np.random.default_rng(seed)

    # conv2d
    n, cin, cout = 2, 3, 4
    h, w = rng.integers(5, 8, size=2)
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    x = rng.standard_normal((n, cin, h, w))
    wt = rng.standard_normal((cout, cin, 3, 3))
    b = rng.standard_normal(cout)
    out, cache = K.conv2d(x, wt, b, stride, pad)
    r = rng.standard_normal(out.shape)
    dx, dw, db = K.conv2d_backward(cache, r)
    f = lambda: np.sum(K.conv2d(x, wt, b, stride, pad)[0] * r)  # noqa: E731
    for name, p, g in (("conv2d.input", x, dx), ("conv2d.weight", wt, dw), ("conv2d.bias", b, db)):
        report.add(name, *check_coordinates(f, p, g, rng, kink_aware=False))

    # batch norm, both modes
    x = rng.standard_normal((3, 4, 3, 3)) * 2 + 1
    state = K.BatchNormState(
        gamma=rng.uniform(0.5, 1.5, 4), beta=rng.standard_normal(4),
        running_mean=rng.standard_normal(4), running_var=rng.uniform(0.5, 2, 4),
    )
    for mode in ("train", "eval"):
        out, cache, _ = K.batch_norm(x, state, mode)
        r = rng.standard_normal(out.shape)
        dx, dg, dbeta = K.batch_norm_backward(cache, r)
        f = lambda: np.sum(K.batch_norm(x, state, mode)[0] * r)  # noqa: E731
        for name, p, g in (("input", x, dx), ("gamma", state.gamma, dg), ("beta", state.beta, dbeta)):
            report.add(f"batch_norm[{mode}].{name}", *check_coordinates(f, p, g, rng, kink_aware=False))

    # pointwise ops; relu inputs kept away from the kink
    x = rng.standard_normal((2, 3, 4, 4))
    x = np.where(np.abs(x) < 0.05, 0.5, x)
    for kind in ("relu", "sigmoid"):
        out, cache = K.activation(x, kind)
        r = rng.standard_normal(out.shape)
        dx = K.activation_backward(cache, r, kind)
        f = lambda: np.sum(K.activation(x, kind)[0] * r)  # noqa: E731
        report.add(f"{kind}.input", *check_coordinates(f, x, dx, rng, kink_aware=False))

    a = rng.standard_normal((2, 3, 4, 4))
    bb = rng.standard_normal((2, 3, 4, 4))
    r = rng.standard_normal(a.shape)
    da, dbb = K.hadamard_backward(K.hadamard(a, bb)[1], r)
    f = lambda: np.sum(K.hadamard(a, bb)[0] * r)  # noqa: E731
    report.add("hadamard.a", *check_coordinates(f, a, da, rng, kink_aware=False))
    report.add("hadamard.b", *check_coordinates(f, bb, dbb, rng, kink_aware=False))

    x = rng.standard_normal((3, 5, 1, 1))
    wt = rng.standard_normal((4, 5))
    b = rng.standard_normal(4)
    out, cache = K.linear(x, wt, b)
    r = rng.standard_normal(out.shape)
    dx, dw, db = K.linear_backward(cache, r)
    f = lambda: np.sum(K.linear(x, wt, b)[0] * r)  # noqa: E731
    for name, p, g in (("linear.input", x, dx), ("linear.weight", wt, dw), ("linear.bias", b, db)):
        report.add(name, *check_coordinates(f, p, g, rng, kink_aware=False))

    x = rng.standard_normal((2, 3, 4, 5))
    out, cache = K.global_avg_pool(x)
    r = rng.standard_normal(out.shape)
    dx = K.global_avg_pool_backward(cache, r)
    f = lambda: np.sum(K.global_avg_pool(x)[0] * r)  # noqa: E731
    report.add("global_avg_pool.input", *check_coordinates(f, x, dx, rng, kink_aware=False))

    z = rng.standard_normal((4, 6))
    y = rng.dirichlet(np.ones(6), size=4)
    _, dz = K.softmax_cross_entropy(z, y)
    f = lambda: K.softmax_cross_entropy(z, y)[0]  # noqa: E731
    report.add("softmax_cross_entropy.logits", *check_coordinates(f, z, dz, rng, kink_aware=False))


def grcl_suite(seed: int, report: GradCheckReport, n_coords: int = 6):
    rng = np.random.default_rng(seed)
    params = init_grcl(rng, 4, 4, T=3, tie_weights=bool(seed % 2 == 0))
    u = rng.standard_normal((2, 4, 8, 8))
    r = rng.standard_normal((2, 4, 8, 8))
    out, cache = grcl_forward(u, params, GateMode.LEARNED, "train")
    d_u, grads = grcl_backward(cache, r)
    f = lambda: np.sum(grcl_forward(u, params, GateMode.LEARNED, "train")[0] * r)  # noqa: E731
    report.add("grcl.input", *check_coordinates(f, u, d_u, rng, n_coords))
    for name, p in params.parameters().items():
        report.add(f"grcl.{_group(name)}", *check_coordinates(f, p, grads[name], rng, n_coords))


def network_suite(seed: int, report: GradCheckReport, n_coords: int = 2, image_size: int = 32):
    rng = np.random.default_rng(seed)
    net = build_grcnn(PRESETS["tiny"](), rng)
    x = rng.uniform(0.0, 1.0, (2, 3, image_size, image_size))
    y = np.eye(net.config.num_classes)[rng.integers(0, net.config.num_classes, 2)]

    def f():
        return K.softmax_cross_entropy(network_forward(net, x, "train")[0], y)[0]

    logits, cache = network_forward(net, x, "train")
    _, d_logits = K.softmax_cross_entropy(logits, y)
    grads, d_x = network_backward(net, cache, d_logits)
    report.add("network.input", *check_coordinates(f, x, d_x, rng, n_coords, max_tries=60))
    for name, p in net.parameters().items():
        report.add(f"network.{name}", *check_coordinates(f, p, grads[name], rng, n_coords, max_tries=60))


def _group(name: str) -> str:
    # fold per-step batch-norm names (a_rec.bn2.gamma) into one group
    parts = name.split(".")
    return ".".join("bnT" if p.startswith("bn") and p[2:].isdigit() else p for p in parts)


SUITES = {"kernel": kernel_suite, "grcl": grcl_suite, "network": network_suite}


def run_grad_check(scope: str, seeds) -> GradCheckReport:
    if scope not in SUITES:
        raise ValueError(f"unknown scope {scope!r}; expected one of {sorted(SUITES)}")
    seeds = [int(s) for s in seeds]
    report = GradCheckReport(scope, TOLERANCES[scope], seeds)
    for s in seeds:
        SUITES[scope](s, report)
    return report
