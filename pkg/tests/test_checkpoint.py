"""Checkpoint format: lossless round-trips and corruption rejection."""

import struct

import numpy as np
import pytest

from reptrain import nn
from reptrain.checkpoint import CheckpointError, load_checkpoint, save_checkpoint


@pytest.fixture
def net():
    return nn.build_network(nn.default_architecture(8, 32), range(2, 10), seed=3)


def test_roundtrip_bitwise(net, tmp_path):
    path = tmp_path / "net_1.ckpt"
    save_checkpoint(net, 1, path)
    loaded, iteration = load_checkpoint(path)
    assert iteration == 1
    assert loaded.layers == net.layers
    assert loaded.class_scores == net.class_scores
    assert loaded.input_shape == net.input_shape
    for pa, pb in zip(net.params, loaded.params):
        assert pa.keys() == pb.keys()
        for key in pa:
            assert np.array_equal(pa[key], pb[key])


def test_roundtrip_forward_identical(net, tmp_path):
    path = tmp_path / "n.ckpt"
    save_checkpoint(net, 4, path)
    loaded, _ = load_checkpoint(path)
    x = np.random.default_rng(0).uniform(0, 1, (2, 3, 32, 32)).astype(np.float32)
    assert np.array_equal(nn.forward(net, x).outputs[-1], nn.forward(loaded, x).outputs[-1])


def test_save_then_save_is_byte_identical(net, tmp_path):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(net, 2, a)
    save_checkpoint(net, 2, b)
    assert a.read_bytes() == b.read_bytes()


def test_truncation_rejected(net, tmp_path):
    path = tmp_path / "n.ckpt"
    save_checkpoint(net, 1, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-1])
    with pytest.raises(CheckpointError, match="corrupt|truncated"):
        load_checkpoint(path)


def test_every_prefix_rejected_without_partial_network(net, tmp_path):
    path = tmp_path / "n.ckpt"
    save_checkpoint(net, 1, path)
    blob = path.read_bytes()
    for cut in (0, 3, 4, 10, 40, len(blob) // 2, len(blob) - 5):
        path.write_bytes(blob[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


def test_flipped_payload_byte_rejected(net, tmp_path):
    path = tmp_path / "n.ckpt"
    save_checkpoint(net, 1, path)
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="CRC"):
        load_checkpoint(path)


def test_bad_magic_rejected(net, tmp_path):
    path = tmp_path / "n.ckpt"
    save_checkpoint(net, 1, path)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"XXXX"
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_unsupported_version_rejected(net, tmp_path):
    import zlib

    path = tmp_path / "n.ckpt"
    save_checkpoint(net, 1, path)
    blob = bytearray(path.read_bytes())[:-4]
    blob[4:8] = struct.pack("<I", 99)
    blob += struct.pack("<I", zlib.crc32(bytes(blob)) & 0xFFFFFFFF)
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="unsupported version 99"):
        load_checkpoint(path)


def test_float64_params_rejected(tmp_path):
    net = nn.build_network(
        (nn.Flatten(), nn.Dense(4, 2)), [2, 3], seed=0, input_shape=(4, 1, 1), dtype=np.float64
    )
    with pytest.raises(ValueError, match="float32"):
        save_checkpoint(net, 1, tmp_path / "n.ckpt")


def test_iteration_tag_roundtrip(net, tmp_path):
    for iteration in (0, 1, 7, 10):
        path = tmp_path / f"net_{iteration}.ckpt"
        save_checkpoint(net, iteration, path)
        assert load_checkpoint(path)[1] == iteration
