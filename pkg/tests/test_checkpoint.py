import struct

import numpy as np
import pytest

from grcnn.checkpoint import (
    CheckpointFormatError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    load_checkpoint,
    restore,
    save_checkpoint,
)
from grcnn.kernels import ShapeError
from grcnn.network import PRESETS, build_grcnn, network_forward
from grcnn.trainer import TrainConfig, TrainState, train_epoch


def trained_state(toy):
    cfg = TrainConfig(batch_size=16, seed=1)
    st = TrainState.fresh(build_grcnn(PRESETS["tiny"](2), 0), cfg)
    train_epoch(st, toy, cfg)
    return st, cfg


def snapshot(st):
    return ({k: v.copy() for k, v in st.net.state_arrays().items()},
            {k: v.copy() for k, v in st.opt.buffers.items()}, st.epoch)


def test_round_trip_bitwise(toy, tmp_path):
    st, cfg = trained_state(toy)
    path = save_checkpoint(st, tmp_path / "a.ckpt", extra={"note": "x"})
    ck = load_checkpoint(path)
    assert ck.epoch == 1 and ck.header["extra"] == {"note": "x"}
    fresh = restore(TrainState.fresh(build_grcnn(PRESETS["tiny"](2), 7), cfg), ck)
    x = toy.images[:5]
    np.testing.assert_array_equal(network_forward(st.net, x, "eval")[0], network_forward(fresh.net, x, "eval")[0])
    np.testing.assert_array_equal(network_forward(ck.build_network(), x, "eval")[0],
                                  network_forward(st.net, x, "eval")[0])
    assert fresh.rng.bit_generator.state == st.rng.bit_generator.state
    for k, v in st.opt.buffers.items():
        np.testing.assert_array_equal(fresh.opt.buffers[k], v)


def test_save_is_deterministic(toy, tmp_path):
    st, _ = trained_state(toy)
    a = save_checkpoint(st, tmp_path / "a.ckpt").read_bytes()
    b = save_checkpoint(st, tmp_path / "b.ckpt").read_bytes()
    assert a == b
    assert not list(tmp_path.glob("*.tmp"))


def corrupt_and_expect(tmp_path, toy, mutate, exc):
    st, cfg = trained_state(toy)
    path = save_checkpoint(st, tmp_path / "c.ckpt")
    path.write_bytes(mutate(path.read_bytes()))
    target = TrainState.fresh(build_grcnn(PRESETS["tiny"](2), 5), cfg)
    before = snapshot(target)
    with pytest.raises(exc):
        restore(target, load_checkpoint(path))
    after = snapshot(target)
    assert all(np.array_equal(before[0][k], after[0][k]) for k in before[0])
    assert before[2] == after[2]


def test_bad_magic(toy, tmp_path):
    corrupt_and_expect(tmp_path, toy, lambda b: b"NOTACKPT" + b[8:], CheckpointFormatError)


def test_version_mismatch(toy, tmp_path):
    corrupt_and_expect(tmp_path, toy, lambda b: b[:8] + struct.pack("<I", 99) + b[12:], CheckpointVersionError)


@pytest.mark.parametrize("keep", [10, 100, 0.5, -1])
def test_truncated(toy, tmp_path, keep):
    def cut(b):
        n = int(len(b) * keep) if isinstance(keep, float) else keep
        return b[:n]

    corrupt_and_expect(tmp_path, toy, cut, CheckpointTruncatedError)


def test_flipped_byte_fails_checksum(toy, tmp_path):
    def flip(b):
        b = bytearray(b)
        b[len(b) // 2] ^= 0xFF
        return bytes(b)

    corrupt_and_expect(tmp_path, toy, flip, CheckpointFormatError)


def test_trailing_bytes(toy, tmp_path):
    corrupt_and_expect(tmp_path, toy, lambda b: b + b"\0", CheckpointFormatError)


def test_architecture_mismatch(toy, tmp_path):
    st, cfg = trained_state(toy)
    ck = load_checkpoint(save_checkpoint(st, tmp_path / "a.ckpt"))
    other = TrainState.fresh(build_grcnn(PRESETS["tiny"](3), 0), cfg)
    before = snapshot(other)
    with pytest.raises(CheckpointShapeError):
        restore(other, ck)
    with pytest.raises(ShapeError):
        restore(other, ck, strict_config=False)
    assert all(np.array_equal(before[0][k], v) for k, v in other.net.state_arrays().items())


def test_frozen_set_survives(toy, tmp_path):
    st, cfg = trained_state(toy)
    st.net.frozen = frozenset(k for k in st.net.parameters() if k.startswith("fc"))
    ck = load_checkpoint(save_checkpoint(st, tmp_path / "f.ckpt"))
    back = restore(TrainState.fresh(build_grcnn(PRESETS["tiny"](2), 0), cfg), ck)
    assert back.net.frozen == st.net.frozen
