"""Training-time input transforms.

Images are float arrays in [0, 1] shaped ``(C, H, W)``; every stochastic
function takes an explicit ``numpy.random.Generator`` so results are a pure
function of (input, seed).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import kernels as K

log = logging.getLogger(__name__)

__all__ = [
    "MixedSample",
    "AugmixConfig",
    "AugmentedTriple",
    "PRIMITIVES",
    "sample_cutmix_mask",
    "cutmix",
    "cutmix_batch",
    "primitive_transform",
    "augmix",
    "phase_randomize",
    "spectrum_error",
    "PhaseSymmetryError",
    "blend",
    "fit_overlay",
    "read_image",
    "write_image",
    "generate_texture_noise_dataset",
    "verify_texture_noise_dataset",
]


# --------------------------------------------------------------------------
# CutMix


@dataclass
class MixedSample:
    image: np.ndarray
    soft_label: np.ndarray
    lam: float
    box: tuple[int, int, int, int]  # (y0, x0, y1, x1), half-open


def sample_cutmix_mask(lam: float, h: int, w: int, rng):
    """Rectangular mask of area fraction ``lam`` (up to rounding of each side).

    The box is ``round(sqrt(lam)*h) x round(sqrt(lam)*w)`` and placed
    uniformly so that it lies entirely inside the image.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    bh = int(round(np.sqrt(lam) * h))
    bw = int(round(np.sqrt(lam) * w))
    y0 = int(rng.integers(0, h - bh + 1))
    x0 = int(rng.integers(0, w - bw + 1))
    mask = np.zeros((h, w))
    mask[y0 : y0 + bh, x0 : x0 + bw] = 1.0
    return mask, (y0, x0, y0 + bh, x0 + bw)


def cutmix(sample_a, sample_b, rng, lam: float | None = None) -> MixedSample:
    """Paste a box of image A into image B.

    The soft label weights ``y_A`` by the realized box area fraction, so label
    weights match pixel provenance exactly. ``lam`` defaults to a U(0, 1) draw.
    """
    xa, ya = (np.asarray(v, dtype=np.float64) for v in sample_a)
    xb, yb = (np.asarray(v, dtype=np.float64) for v in sample_b)
    if xa.shape != xb.shape:
        raise K.ShapeError(f"cutmix: image shapes {xa.shape} and {xb.shape} differ")
    if ya.shape != yb.shape:
        raise K.ShapeError(f"cutmix: label shapes {ya.shape} and {yb.shape} differ")
    if lam is None:
        lam = float(rng.uniform(0.0, 1.0))
    h, w = xa.shape[-2:]
    mask, box = sample_cutmix_mask(lam, h, w, rng)
    image = mask * xa + (1.0 - mask) * xb
    frac = float(mask.sum()) / (h * w)
    return MixedSample(image, frac * ya + (1.0 - frac) * yb, lam, box)


def cutmix_batch(images, labels, rng):
    """CutMix every sample with a random partner from the same batch."""
    perm = rng.permutation(len(images))
    out_x = np.empty_like(images)
    out_y = np.empty_like(labels)
    for i, j in enumerate(perm):
        m = cutmix((images[i], labels[i]), (images[j], labels[j]), rng)
        out_x[i], out_y[i] = m.image, m.soft_label
    return out_x, out_y


# --------------------------------------------------------------------------
# primitive operations

# max magnitude per op: pixels, degrees, shear factor, bits, threshold fraction, blend weight
PRIMITIVES = {
    "translate_x": 4.0,
    "translate_y": 4.0,
    "rotate": 30.0,
    "shear_x": 0.3,
    "shear_y": 0.3,
    "posterize": 4.0,
    "solarize": 1.0,
    "autocontrast": 1.0,
    "equalize": 1.0,
}
_GEOMETRIC = {"translate_x", "translate_y", "rotate", "shear_x", "shear_y"}


def _affine(image, matrix, offset_fn):
    # matrix maps output (row, col) to input coordinates about the image centre
    h, w = image.shape[-2:]
    center = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = center - matrix @ center + offset_fn
    return np.stack(
        [ndimage.affine_transform(ch, matrix, offset=offset, order=1, mode="nearest") for ch in image]
    )


def _autocontrast(image):
    lo = image.min(axis=(1, 2), keepdims=True)
    hi = image.max(axis=(1, 2), keepdims=True)
    span = np.where(hi > lo, hi - lo, 1.0)
    return np.where(hi > lo, (image - lo) / span, image)


def _equalize(image):
    out = np.empty_like(image)
    for c, ch in enumerate(image):
        q = np.clip(np.round(ch * 255), 0, 255).astype(int)
        hist = np.bincount(q.ravel(), minlength=256)
        cdf = np.cumsum(hist).astype(np.float64)
        nz = cdf[hist > 0][0]
        if cdf[-1] == nz:
            out[c] = ch
            continue
        out[c] = ((cdf[q] - nz) / (cdf[-1] - nz)).clip(0, 1)
    return out


def primitive_transform(image, kind: str, magnitude: float) -> np.ndarray:
    """Apply one deterministic op; ``magnitude == 0`` is the identity for every kind.

    Geometric ops resample bilinearly with edge (nearest) padding.
    Photometric ops with no natural strength (autocontrast, equalize) blend
    the full effect in with weight ``magnitude`` in [0, 1].
    """
    if kind not in PRIMITIVES:
        raise ValueError(f"unknown primitive {kind!r}")
    x = np.asarray(image, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    m = float(magnitude)
    if m == 0.0:
        out = x.copy()
    elif kind == "translate_x":
        out = _affine(x, np.eye(2), np.array([0.0, -m]))
    elif kind == "translate_y":
        out = _affine(x, np.eye(2), np.array([-m, 0.0]))
    elif kind == "rotate":
        t = np.deg2rad(m)
        rot = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
        out = _affine(x, rot, np.zeros(2))
    elif kind == "shear_x":
        out = _affine(x, np.array([[1.0, 0.0], [m, 1.0]]), np.zeros(2))
    elif kind == "shear_y":
        out = _affine(x, np.array([[1.0, m], [0.0, 1.0]]), np.zeros(2))
    elif kind == "posterize":
        bits = int(np.clip(round(m), 0, 7))
        step = 2**bits
        q = np.clip(np.round(x * 255), 0, 255).astype(int)
        out = ((q // step) * step) / 255.0 if bits else x.copy()
    elif kind == "solarize":
        threshold = 1.0 - np.clip(m, 0.0, 1.0)
        out = np.where(x > threshold, 1.0 - x, x)
    elif kind == "autocontrast":
        out = x + np.clip(m, 0, 1) * (_autocontrast(x) - x)
    else:
        out = x + np.clip(m, 0, 1) * (_equalize(x) - x)
    return out[0] if squeeze else out


# --------------------------------------------------------------------------
# AugMix


@dataclass(frozen=True)
class AugmixConfig:
    width: int = 3
    max_depth: int = 3
    magnitude: float = 0.5  # severity in (0, 1], scales each op's max magnitude
    dirichlet_alpha: float = 1.0
    beta_alpha: float = 1.0
    ops: tuple[str, ...] = tuple(PRIMITIVES)

    def __post_init__(self):
        if self.width < 1 or self.max_depth < 1:
            raise ValueError("width and max_depth must be >= 1")
        if self.dirichlet_alpha <= 0 or self.beta_alpha <= 0:
            raise ValueError("mixing distribution parameters must be positive")
        unknown = set(self.ops) - set(PRIMITIVES) - {"identity"}
        if unknown:
            raise ValueError(f"unknown ops {sorted(unknown)}")


@dataclass
class AugmentedTriple:
    clean: np.ndarray
    aug1: np.ndarray
    aug2: np.ndarray


def _sample_op(cfg: AugmixConfig, rng):
    kind = cfg.ops[int(rng.integers(len(cfg.ops)))]
    if kind == "identity":
        return kind, 0.0
    m = rng.uniform(0.1, 1.0) * cfg.magnitude * PRIMITIVES[kind]
    if kind in _GEOMETRIC and rng.random() < 0.5:
        m = -m
    return kind, m


def _augmix_once(x, cfg: AugmixConfig, rng):
    weights = rng.dirichlet([cfg.dirichlet_alpha] * cfg.width)
    m = rng.beta(cfg.beta_alpha, cfg.beta_alpha)
    # written as x + sum(w * (chain - x)) so all-identity chains return x bit for bit
    delta = np.zeros_like(x)
    for w in weights:
        chain = x
        for _ in range(int(rng.integers(1, cfg.max_depth + 1))):
            kind, mag = _sample_op(cfg, rng)
            if kind != "identity":
                chain = primitive_transform(chain, kind, mag)
        delta += w * (chain - x)
    return np.clip(x + m * delta, 0.0, 1.0)


def augmix(image, cfg: AugmixConfig | None = None, rng=None) -> AugmentedTriple:
    """Clean image plus two independent AugMix draws."""
    cfg = cfg or AugmixConfig()
    rng = np.random.default_rng(rng)
    x = np.asarray(image, dtype=np.float64)
    return AugmentedTriple(x, _augmix_once(x, cfg, rng), _augmix_once(x, cfg, rng))


# --------------------------------------------------------------------------
# phase randomization


class PhaseSymmetryError(RuntimeError):
    """Inverse transform left an imaginary residue; the phase field was not Hermitian."""


def _mirror(a: np.ndarray) -> np.ndarray:
    # a[-k mod N] for every frequency index k
    return np.roll(a[::-1, ::-1], shift=(1, 1), axis=(0, 1))


def phase_randomize(image, rng, residue_tol: float = 1e-9) -> np.ndarray:
    """Replace Fourier phases with uniform random ones, keeping the magnitude spectrum.

    Phases are ``(phi(k) - phi(-k)) mod 2pi`` for i.i.d. uniform ``phi``, which
    is again uniform and odd under ``k -> -k``, so the inverse transform is
    real. Self-conjugate bins (DC and Nyquist) keep their original values.
    """
    x = np.asarray(image, dtype=np.float64)
    if x.ndim != 2:
        raise K.ShapeError(f"phase_randomize expects a 2-D array, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError("phase_randomize: input contains non-finite values")
    rng = np.random.default_rng(rng)
    spec = K.fft2d(x)
    phi = rng.uniform(0.0, 2 * np.pi, size=x.shape)
    phase = np.mod(phi - _mirror(phi), 2 * np.pi)
    out_spec = np.abs(spec) * np.exp(1j * phase)
    self_conj = _self_conjugate_mask(x.shape)
    out_spec[self_conj] = spec[self_conj]
    out = K.ifft2d(out_spec)
    residue = float(np.max(np.abs(out.imag))) if out.size else 0.0
    if residue >= residue_tol:
        raise PhaseSymmetryError(f"imaginary residue {residue:.3e} exceeds {residue_tol:g}")
    return out.real.copy()


def _self_conjugate_mask(shape) -> np.ndarray:
    h, w = shape
    ky = np.arange(h)
    kx = np.arange(w)
    sy = (ky == (-ky) % h)
    sx = (kx == (-kx) % w)
    return sy[:, None] & sx[None, :]


def spectrum_error(source, noise) -> float:
    """Relative L2 difference of the two magnitude spectra."""
    a = np.abs(K.fft2d(source))
    b = np.abs(K.fft2d(noise))
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), 1e-300))


# --------------------------------------------------------------------------
# texture blending


def blend(image, overlay, alpha: float) -> np.ndarray:
    """``(1 - alpha) * image + alpha * overlay`` clamped to [0, 1].

    A single-channel overlay is replicated across the image's channels.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    x = np.asarray(image, dtype=np.float64)
    o = np.asarray(overlay, dtype=np.float64)
    if o.ndim == x.ndim - 1:
        o = o[None]
    try:
        o = np.broadcast_to(o, x.shape)
    except ValueError:
        raise K.ShapeError(f"blend: overlay {overlay.shape} does not broadcast to {x.shape}") from None
    return np.clip((1.0 - alpha) * x + alpha * o, 0.0, 1.0)


def fit_overlay(overlay, h: int, w: int, rng) -> np.ndarray:
    """Random ``h x w`` crop of a 2-D overlay, tiling it first when too small."""
    o = np.asarray(overlay, dtype=np.float64)
    reps = (-(-h // o.shape[0]), -(-w // o.shape[1]))
    if reps != (1, 1):
        o = np.tile(o, reps)
    y0 = int(rng.integers(0, o.shape[0] - h + 1))
    x0 = int(rng.integers(0, o.shape[1] - w + 1))
    return o[y0 : y0 + h, x0 : x0 + w]


# --------------------------------------------------------------------------
# texture / noise dataset files

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".gif"}
MANIFEST_COLUMNS = ["name", "texture_path", "noise_path", "seed", "status"]


def read_image(path, mode: str = "L") -> np.ndarray:
    """Read an 8-bit image as floats in [0, 1]; ``(H, W)`` for mode "L", else ``(C, H, W)``."""
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert(mode), dtype=np.float64) / 255.0
    return arr if arr.ndim == 2 else arr.transpose(2, 0, 1)


def write_image(path, image) -> None:
    """Write a [0, 1] float image as 8-bit PNG (values are clipped)."""
    from PIL import Image

    a = np.asarray(image, dtype=np.float64)
    if a.ndim == 3:
        a = a[0] if a.shape[0] == 1 else a.transpose(1, 2, 0)
    q = np.clip(np.round(a * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q).save(path, format="PNG")


def _texture_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), index]).generate_state(1)[0])


def generate_texture_noise_dataset(texture_dir, out_dir, seed: int = 0) -> list[dict]:
    """Write each texture and its phase-randomized "noise" counterpart.

    Layout under ``out_dir``: ``textures/<name>.png``, ``noise/<name>.png``,
    ``noise/<name>.npy`` (exact float64 noise, since 8-bit PNG cannot hold
    out-of-range or sub-quantum values) and ``manifest.tsv``. Unreadable inputs
    are recorded with status ``skipped``.
    """
    texture_dir, out_dir = Path(texture_dir), Path(out_dir)
    files = sorted(p for p in texture_dir.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    (out_dir / "textures").mkdir(parents=True, exist_ok=True)
    (out_dir / "noise").mkdir(parents=True, exist_ok=True)
    rows = []
    for i, path in enumerate(files):
        name = path.stem
        s = _texture_seed(seed, i)
        try:
            tex = read_image(path, "L")
        except Exception as exc:  # noqa: BLE001 - any decode failure is a skip
            log.warning("skipping %s: %s", path, exc)
            rows.append({"name": name, "texture_path": str(path), "noise_path": "", "seed": s, "status": "skipped"})
            continue
        noise = phase_randomize(tex, np.random.default_rng(s))
        tex_out = out_dir / "textures" / f"{name}.png"
        noise_out = out_dir / "noise" / f"{name}.png"
        write_image(tex_out, tex)
        write_image(noise_out, noise)
        np.save(noise_out.with_suffix(".npy"), noise)
        rows.append({
            "name": name,
            "texture_path": f"textures/{name}.png",
            "noise_path": f"noise/{name}.png",
            "seed": s,
            "status": "ok",
        })
    with open(out_dir / "manifest.tsv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, MANIFEST_COLUMNS, delimiter="\t", lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return rows


def read_manifest(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh, delimiter="\t"))


def verify_texture_noise_dataset(out_dir, tol: float = 1e-9) -> list[dict]:
    """Check every generated pair; one result dict per manifest row."""
    out_dir = Path(out_dir)
    results = []
    for row in read_manifest(out_dir / "manifest.tsv"):
        if row.get("status", "ok") != "ok":
            results.append({"name": row["name"], "passed": None, "detail": "skipped"})
            continue
        tex = read_image(out_dir / row["texture_path"], "L")
        noise = np.load(out_dir / Path(row["noise_path"]).with_suffix(".npy"))
        err = spectrum_error(tex, noise)
        mean_err = abs(float(tex.mean()) - float(noise.mean()))
        ok = noise.shape == tex.shape and np.isrealobj(noise) and err < tol and mean_err < tol
        results.append({"name": row["name"], "passed": bool(ok), "spectrum_rel_error": err, "mean_abs_error": mean_err})
    return results
