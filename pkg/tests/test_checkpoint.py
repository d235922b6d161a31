import struct

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from pydmobilenet.checkpoint import (CheckpointError, build_from_checkpoint, decode_checkpoint,
                                     encode_checkpoint, load_checkpoint, model_tensors, restore,
                                     save_checkpoint)
from pydmobilenet.data import BatchIterator, Normalizer, synthetic_quadrants
from pydmobilenet.models import NetworkConfig, build_network
from pydmobilenet.tensor import make_rng
from pydmobilenet.train import NesterovSGD, evaluate, train_epoch


@pytest.fixture(scope="module")
def trained():
    px, y = synthetic_quadrants(32, make_rng(0, 9))
    norm = Normalizer.fit(px)
    model = build_network(NetworkConfig("pyd_add", 1, 0.25, classes=4), make_rng(0))
    opt = NesterovSGD(model.params())
    train_epoch(model, BatchIterator(px, y, norm, 8), opt, 0.1)
    return model, opt, BatchIterator(px, y, norm, 8, train=False)


def test_round_trip_is_bit_exact(tmp_path, trained):
    model, opt, data = trained
    save_checkpoint(tmp_path / "m.pydn", model, opt, epoch=3, extra={"meta/x": np.arange(6.0)})
    ck = load_checkpoint(tmp_path / "m.pydn")
    assert ck.model_name == "PydMobileNet-Add-11-0.25" and ck.epoch == 3
    for name, arr in model_tensors(model, opt).items():
        assert np.array_equal(ck.tensors[name], arr)
    assert np.array_equal(ck.tensors["meta/x"], np.arange(6.0))
    fresh = build_from_checkpoint(ck)
    assert evaluate(fresh, data) == evaluate(model, data)
    opt2 = NesterovSGD(fresh.params())
    restore(ck, fresh, opt2)
    assert all(np.array_equal(a, b) for a, b in zip(opt.velocity, opt2.velocity))


def test_layout_header(trained):
    model, _, _ = trained
    raw = encode_checkpoint(model.name, 7, model_tensors(model))
    assert raw[:4] == b"PYDN"
    version, name_len = struct.unpack_from("<II", raw, 4)
    assert version == 1 and raw[12:12 + name_len].decode() == model.name
    assert struct.unpack_from("<I", raw, 12 + name_len)[0] == 7


def test_wrong_architecture_rejected(trained):
    model, _, _ = trained
    ck = decode_checkpoint(encode_checkpoint(model.name, 0, model_tensors(model)))
    other = build_network(NetworkConfig("pyd_concat", 1, 0.25, classes=4), make_rng(1))
    with pytest.raises(CheckpointError, match="checkpoint is for"):
        restore(ck, other)
    before = [p.value.copy() for p in other.params()]
    with pytest.raises(CheckpointError):
        restore(ck, other, strict_name=False)
    assert all(np.array_equal(a, p.value) for a, p in zip(before, other.params()))


def _set_first_dtype_tag(raw: bytes, tag: int) -> bytes:
    name_len = struct.unpack_from("<I", raw, 8)[0]
    rec = 16 + name_len
    tag_at = rec + 4 + struct.unpack_from("<I", raw, rec)[0]
    return raw[:tag_at] + struct.pack("<I", tag) + raw[tag_at + 4:]


@pytest.mark.parametrize("mutate,match", [
    (lambda raw: b"XXXX" + raw[4:], "magic"),
    (lambda raw: raw[:4] + struct.pack("<I", 2) + raw[8:], "version"),
    (lambda raw: raw[:-3], "truncated"),
    (lambda raw: raw[:8] + struct.pack("<I", 10 ** 6) + raw[12:], "truncated"),
    (lambda raw: _set_first_dtype_tag(raw, 5), "dtype tag 5"),
])
def test_corruption(trained, mutate, match):
    model, _, _ = trained
    raw = encode_checkpoint(model.name, 0, model_tensors(model))
    with pytest.raises(CheckpointError, match=match):
        decode_checkpoint(mutate(raw))


def test_duplicate_and_missing(tmp_path):
    one = {"param/a": np.zeros(2, np.float32)}
    raw = encode_checkpoint("m", 0, one)
    dup = raw + raw[len(raw) - (4 + 7 + 4 + 4 + 4 + 8):]
    with pytest.raises(CheckpointError, match="duplicate"):
        decode_checkpoint(dup)
    with pytest.raises(CheckpointError, match="no checkpoint"):
        load_checkpoint(tmp_path / "absent.pydn")


@settings(max_examples=60, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.data())
def test_fuzzed_bytes_fail_cleanly(trained, data):
    model, _, _ = trained
    raw = bytearray(encode_checkpoint(model.name, 0, dict(list(model_tensors(model).items())[:3])))
    for _ in range(data.draw(st.integers(1, 4))):
        raw[data.draw(st.integers(0, len(raw) - 1))] = data.draw(st.integers(0, 255))
    cut = data.draw(st.integers(0, len(raw)))
    try:
        decode_checkpoint(bytes(raw[:cut]))
    except CheckpointError:
        pass
