import struct
import zlib

import numpy as np
import pytest

from defectnet import checkpoint as ck
from defectnet.model import DefectNet
from defectnet.segnet import SegNetConfig


@pytest.fixture
def tensors(rng):
    return {
        "a.weight": rng.standard_normal((3, 2, 3, 3)).astype(np.float32),
        "a.bias": rng.standard_normal(3).astype(np.float32),
        "scalar": np.array(0.25, np.float32),
        "empty": np.zeros((0, 4), np.float32),
    }


@pytest.fixture
def saved(tmp_path, tensors):
    path = tmp_path / "m.ckpt"
    ck.save_checkpoint(tensors, path, meta={"note": "x"})
    return path


def test_round_trip_bit_exact(saved, tensors):
    loaded, meta = ck.load_checkpoint(saved)
    assert list(loaded) == list(tensors)
    for k, v in tensors.items():
        assert loaded[k].shape == v.shape and loaded[k].tobytes() == v.tobytes()
    assert meta == {"note": "x"}


def test_special_values_round_trip(tmp_path):
    arr = np.array([np.inf, -0.0, np.nan, 1e-45, -3.4e38], np.float32)
    ck.save_checkpoint({"x": arr}, tmp_path / "s.ckpt")
    assert ck.load_checkpoint(tmp_path / "s.ckpt")[0]["x"].tobytes() == arr.tobytes()


def test_layout(saved):
    blob = saved.read_bytes()
    assert blob[:5] == b"PNET1"
    version, hlen = struct.unpack_from("<II", blob, 5)
    assert version == ck.VERSION
    header = blob[13:13 + hlen].decode()
    assert header.splitlines()[1:] == ["a.weight 3 2 3 3", "a.bias 3", "scalar", "empty 0 4"]


def test_every_truncation_rejected(saved):
    blob = saved.read_bytes()
    for n in range(len(blob)):
        saved.write_bytes(blob[:n])
        with pytest.raises(ck.CheckpointError):
            ck.load_checkpoint(saved)


def test_bad_magic(saved):
    blob = saved.read_bytes()
    saved.write_bytes(b"XNET1" + blob[5:])
    with pytest.raises(ck.BadMagicError):
        ck.load_checkpoint(saved)


def test_version_mismatch(saved):
    blob = bytearray(saved.read_bytes())
    struct.pack_into("<I", blob, 5, 99)
    saved.write_bytes(bytes(blob))
    with pytest.raises(ck.VersionMismatchError, match="99"):
        ck.load_checkpoint(saved)


def _reseal(blob):
    body = blob[5:-4]
    return blob[:5] + body + struct.pack("<I", zlib.crc32(body))


def test_edited_shape(saved):
    edited = saved.read_bytes().replace(b"a.bias 3\n", b"a.bias 4\n")
    saved.write_bytes(edited)
    with pytest.raises(ck.ChecksumError):
        ck.load_checkpoint(saved)
    # with a recomputed checksum the size disagreement itself is reported
    saved.write_bytes(_reseal(edited))
    with pytest.raises(ck.PayloadSizeError, match="need 236 payload bytes, file holds 232"):
        ck.load_checkpoint(saved)


def test_edited_meta(saved):
    saved.write_bytes(saved.read_bytes().replace(b'"x"', b'"y"'))
    with pytest.raises(ck.ChecksumError):
        ck.load_checkpoint(saved)


def test_payload_bit_flip(saved):
    blob = bytearray(saved.read_bytes())
    blob[-10] ^= 0x01
    saved.write_bytes(bytes(blob))
    with pytest.raises(ck.ChecksumError):
        ck.load_checkpoint(saved)


def test_every_single_byte_flip_rejected(saved):
    blob = saved.read_bytes()
    for i in range(len(blob)):
        bad = bytearray(blob)
        bad[i] ^= 0xFF
        saved.write_bytes(bytes(bad))
        with pytest.raises(ck.CheckpointError):
            ck.load_checkpoint(saved)


def test_bad_names(tmp_path):
    with pytest.raises(ValueError):
        ck.save_checkpoint({"has space": np.zeros(1)}, tmp_path / "x.ckpt")


def test_model_round_trip(tmp_path, rng):
    m = DefectNet.create(SegNetConfig([4, 8], 8, 1), {"t1": 0.4, "t2": [0.05, 0.07]}, seed=2)
    m.operating_threshold = 0.375
    m.save(tmp_path / "m.ckpt")
    back = DefectNet.load(tmp_path / "m.ckpt")
    a, b = m.state_dict(), back.state_dict()
    assert list(a) == list(b)
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()
    assert back.operating_threshold == 0.375 and back.seg.config == m.seg.config
    x = rng.uniform(size=(1, 1, 16, 16)).astype(np.float32)
    assert m.predict(x)["score"].tobytes() == back.predict(x)["score"].tobytes()


def test_model_load_wrong_shape(tmp_path):
    m = DefectNet.create(SegNetConfig([4, 8], 8, 1), seed=0)
    state = m.state_dict()
    state["block1.weight"] = np.zeros((4, 1, 3, 2), np.float32)
    ck.save_checkpoint(state, tmp_path / "m.ckpt", m.meta())
    with pytest.raises(ck.HeaderError, match="block1.weight"):
        DefectNet.load(tmp_path / "m.ckpt")
