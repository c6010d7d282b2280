import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grcnn import kernels as K
from grcnn.augment import (
    PRIMITIVES,
    AugmixConfig,
    PhaseSymmetryError,
    augmix,
    blend,
    cutmix,
    cutmix_batch,
    fit_overlay,
    generate_texture_noise_dataset,
    phase_randomize,
    primitive_transform,
    read_manifest,
    sample_cutmix_mask,
    spectrum_error,
    verify_texture_noise_dataset,
    write_image,
)


def test_mask_extremes_and_quarter():
    rng = np.random.default_rng(0)
    m, box = sample_cutmix_mask(1.0, 32, 32, rng)
    assert m.all() and box == (0, 0, 32, 32)
    m, _ = sample_cutmix_mask(0.0, 32, 32, rng)
    assert not m.any()
    m, (y0, x0, y1, x1) = sample_cutmix_mask(0.25, 32, 32, rng)
    assert (y1 - y0, x1 - x0) == (16, 16)
    assert m.sum() == 256
    with pytest.raises(ValueError):
        sample_cutmix_mask(1.5, 4, 4, rng)


def test_cutmix_identities():
    rng = np.random.default_rng(1)
    xa, xb = rng.uniform(0, 1, (2, 3, 8, 8))
    ya, yb = np.eye(4)[[0, 2]]
    same = cutmix((xa, ya), (xa, ya), rng)
    np.testing.assert_array_equal(same.image, xa)
    np.testing.assert_array_equal(same.soft_label, ya)
    full = cutmix((xa, ya), (xb, yb), rng, lam=1.0)
    np.testing.assert_array_equal(full.image, xa)
    np.testing.assert_array_equal(full.soft_label, ya)
    none = cutmix((xa, ya), (xb, yb), rng, lam=0.0)
    np.testing.assert_array_equal(none.image, xb)
    np.testing.assert_array_equal(none.soft_label, yb)
    with pytest.raises(K.ShapeError):
        cutmix((xa, ya), (xb[:, :4], yb), rng)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(4, 40), st.integers(4, 40))
def test_cutmix_label_matches_pixels(seed, h, w):
    rng = np.random.default_rng(seed)
    xa = np.ones((1, h, w))
    xb = np.zeros((1, h, w))
    m = cutmix((xa, np.array([1.0, 0.0])), (xb, np.array([0.0, 1.0])), rng)
    frac = m.image.mean()
    assert abs(frac - m.soft_label[0]) <= 1.0 / (h * w)
    assert abs(m.soft_label.sum() - 1.0) < 1e-12


def test_cutmix_batch_keeps_distributions():
    rng = np.random.default_rng(2)
    x = rng.uniform(0, 1, (6, 3, 8, 8))
    y = np.eye(3)[rng.integers(0, 3, 6)]
    xm, ym = cutmix_batch(x, y, rng)
    assert xm.shape == x.shape
    np.testing.assert_allclose(ym.sum(axis=1), 1.0)


@pytest.mark.parametrize("kind", sorted(PRIMITIVES))
def test_zero_magnitude_is_identity(kind):
    x = np.random.default_rng(3).uniform(0, 1, (3, 12, 12))
    np.testing.assert_array_equal(primitive_transform(x, kind, 0.0), x)


@pytest.mark.parametrize("k", [1, 2, 3])
@pytest.mark.parametrize("axis", ["x", "y"])
def test_translate_round_trip(k, axis):
    x = np.random.default_rng(k).uniform(0, 1, (2, 16, 16))
    back = primitive_transform(primitive_transform(x, f"translate_{axis}", k), f"translate_{axis}", -k)
    # edge padding overwrites a k-pixel border; the interior is exact
    inner = (slice(None), slice(k, -k), slice(k, -k))
    np.testing.assert_allclose(back[inner], x[inner], atol=1e-6)


def test_rotate_full_turn():
    x = np.random.default_rng(4).uniform(0, 1, (1, 15, 15))
    np.testing.assert_allclose(primitive_transform(x, "rotate", 360.0), x, atol=1e-6)


def test_unknown_primitive():
    with pytest.raises(ValueError):
        primitive_transform(np.zeros((1, 4, 4)), "blur", 1.0)


def test_augmix_identity_and_determinism():
    x = np.random.default_rng(5).uniform(0, 1, (3, 10, 10))
    ident = augmix(x, AugmixConfig(width=1, max_depth=1, ops=("identity",)), 0)
    np.testing.assert_array_equal(ident.aug1, x)
    np.testing.assert_array_equal(ident.aug2, x)
    a, b = augmix(x, AugmixConfig(), 7), augmix(x, AugmixConfig(), 7)
    np.testing.assert_array_equal(a.aug1, b.aug1)
    np.testing.assert_array_equal(a.aug2, b.aug2)
    assert not np.array_equal(a.aug1, a.aug2)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_augmix_range(seed):
    x = np.random.default_rng(seed).uniform(0, 1, (3, 8, 8))
    t = augmix(x, AugmixConfig(magnitude=1.0), seed)
    for im in (t.aug1, t.aug2):
        assert im.min() >= 0.0 and im.max() <= 1.0


def test_augmix_config_validation():
    with pytest.raises(ValueError):
        AugmixConfig(width=0)
    with pytest.raises(ValueError):
        AugmixConfig(ops=("blur",))


def test_phase_randomize_constant():
    np.testing.assert_allclose(phase_randomize(np.full((8, 8), 0.3), 0), 0.3, atol=1e-15)


@pytest.mark.parametrize("shape", [(8, 8), (9, 7), (16, 10), (1, 5)])
def test_phase_randomize_spectrum(shape):
    x = np.random.default_rng(6).uniform(0, 1, shape)
    y = phase_randomize(x, 1)
    assert spectrum_error(x, y) < 1e-9
    assert abs(x.mean() - y.mean()) < 1e-9
    assert not np.allclose(x, y) or min(shape) == 1


def test_phase_randomize_errors():
    with pytest.raises(K.ShapeError):
        phase_randomize(np.zeros((2, 4, 4)), 0)
    with pytest.raises(PhaseSymmetryError):
        phase_randomize(np.random.default_rng(0).uniform(0, 1, (8, 8)), 0, residue_tol=0.0)


def test_blend():
    img = np.random.default_rng(7).uniform(0, 1, (3, 4, 4))
    ov = np.random.default_rng(8).uniform(0, 1, (4, 4))
    np.testing.assert_array_equal(blend(img, ov, 0.0), img)
    np.testing.assert_array_equal(blend(img, ov, 1.0), np.broadcast_to(ov, img.shape))
    np.testing.assert_allclose(blend(np.full((1, 2, 2), 0.2), np.full((2, 2), 0.6), 0.5), 0.4)
    with pytest.raises(ValueError):
        blend(img, ov, 1.5)


def test_fit_overlay_tiles():
    ov = np.arange(6.0).reshape(2, 3)
    out = fit_overlay(ov, 5, 7, np.random.default_rng(0))
    assert out.shape == (5, 7)
    assert set(np.unique(out)) <= set(range(6))


def _textures(d, n=5, size=(24, 20)):
    d.mkdir()
    rng = np.random.default_rng(0)
    for i in range(n):
        write_image(d / f"tex{i}.png", rng.uniform(0, 1, size))
    return d


def test_texture_noise_dataset(tmp_path):
    src = _textures(tmp_path / "src")
    (src / "broken.png").write_bytes(b"not a png")
    rows = generate_texture_noise_dataset(src, tmp_path / "out", seed=3)
    assert len(rows) == 6
    assert [r["status"] for r in rows].count("skipped") == 1
    assert len(list((tmp_path / "out" / "noise").glob("*.png"))) == 5
    assert len(read_manifest(tmp_path / "out" / "manifest.tsv")) == 6
    results = verify_texture_noise_dataset(tmp_path / "out")
    assert [r["passed"] for r in results].count(True) == 5


def test_texture_noise_rerun_is_byte_identical(tmp_path):
    src = _textures(tmp_path / "src", 3)

    def digest(root):
        return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
                for p in sorted(root.rglob("*")) if p.is_file()}

    generate_texture_noise_dataset(src, tmp_path / "a", seed=9)
    generate_texture_noise_dataset(src, tmp_path / "b", seed=9)
    assert digest(tmp_path / "a") == digest(tmp_path / "b")
    generate_texture_noise_dataset(src, tmp_path / "c", seed=10)
    assert digest(tmp_path / "a") != digest(tmp_path / "c")
