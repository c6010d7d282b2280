import numpy as np
import pytest

from grcnn.grcl import GateMode, init_grcl
from grcnn.network import PRESETS, build_grcnn
from grcnn.receptive_field import receptive_field_probe

# frozen probe outputs: 3x3 kernels on a 33x33 input, centre output
EXPECTED_RADIUS = {0: 1.0, 1: 2.0, 2: 3.0, 3: 4.0, 4: 5.0, 5: 6.0}


def test_single_conv_footprint():
    res = receptive_field_probe(np.ones((1, 1, 3, 3)), (33, 33), (16, 16))
    assert res.extent == (3, 3)
    assert res.radius == 1.0
    assert res.support.sum() == 9


@pytest.mark.parametrize("T", sorted(EXPECTED_RADIUS))
def test_grcl_radius_per_step(T):
    p = init_grcl(np.random.default_rng(T), 2, 2, T=T)
    assert receptive_field_probe(p, (33, 33), (16, 16)).radius == EXPECTED_RADIUS[T]


@pytest.mark.parametrize("mode", list(GateMode))
def test_growth_in_all_open_modes(mode):
    radii = [receptive_field_probe(init_grcl(np.random.default_rng(0), 1, 1, T=T), (33, 33), (16, 16),
                                   mode=mode).radius for T in range(4)]
    if mode is GateMode.SATURATED_CLOSED:
        assert radii == [1.0] * 4
    else:
        assert all(b > a for a, b in zip(radii, radii[1:]))


def test_saturation_at_image_extent():
    p = init_grcl(np.random.default_rng(0), 1, 1, T=20)
    res = receptive_field_probe(p, (33, 33), (16, 16))
    assert res.extent == (33, 33)
    assert res.radius == 16.0


def test_network_probe_covers_tiny_input():
    net = build_grcnn(PRESETS["tiny"](), 0)
    res = receptive_field_probe(net, (32, 32), (0, 0))
    assert res.support.shape == (32, 32)
    assert res.radius <= 15.5


def test_probe_ignores_weight_signs():
    a = init_grcl(np.random.default_rng(1), 2, 2, T=2)
    b = init_grcl(np.random.default_rng(2), 2, 2, T=2)
    for w in b.parameters().values():
        w *= -1
    ra = receptive_field_probe(a, (15, 15), (7, 7)).support
    rb = receptive_field_probe(b, (15, 15), (7, 7)).support
    np.testing.assert_array_equal(ra, rb)


def test_invalid_coordinate():
    p = init_grcl(np.random.default_rng(0), 1, 1, T=1)
    with pytest.raises(ValueError):
        receptive_field_probe(p, (9, 9), (9, 0))
    with pytest.raises(TypeError):
        receptive_field_probe("nope", (9, 9), (0, 0))
