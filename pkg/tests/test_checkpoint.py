import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from eventssm.checkpoint import (
    MAGIC, CheckpointError, decode, encode, load_checkpoint, load_train_state, save_checkpoint,
    save_train_state,
)
from eventssm.model import init_weights
from eventssm.training import TrainConfig, TrainState, loss_and_grads, optimizer_step, random_batch, tiny_config


def test_layout_of_a_tiny_file():
    buf = encode({"w": np.array([1.0, 2.0], "<f4")}, {"b": 1, "a": [2]})
    assert buf[:8] == MAGIC
    assert struct.unpack_from("<I", buf, 8) == (1,)
    (meta_len,) = struct.unpack_from("<Q", buf, 12)
    assert buf[20:20 + meta_len] == b'{"a":[2],"b":1}'
    # u32 count, u16 name len, name, u8 dtype len, "<f4", u8 ndim, u64 shape, u64 nbytes, data, crc
    assert len(buf) == 20 + meta_len + 4 + 2 + 1 + 1 + 3 + 1 + 8 + 8 + 8 + 4


def test_round_trip_is_byte_exact(tmp_path):
    tensors = {
        "a": np.arange(6, dtype=np.float32).reshape(2, 3),
        "b.c": np.array(3.5),
        "empty": np.zeros((0, 4), np.int64),
        "big": np.arange(5, dtype=">i4"),
    }
    save_checkpoint(tmp_path / "x", tensors, {"k": "v", "n": [1, 2]})
    loaded, meta = load_checkpoint(tmp_path / "x")
    assert meta == {"k": "v", "n": [1, 2]}
    assert list(loaded) == list(tensors)
    for k in tensors:
        assert np.array_equal(loaded[k], tensors[k]) and loaded[k].shape == tensors[k].shape
    assert loaded["big"].dtype == np.dtype("<i4")
    save_checkpoint(tmp_path / "y", loaded, meta)
    assert (tmp_path / "x").read_bytes() == (tmp_path / "y").read_bytes()


@settings(max_examples=60, deadline=None)
@given(
    arrays=st.lists(
        hnp.arrays(st.sampled_from([np.float32, np.float64, np.int64, np.uint8]),
                   hnp.array_shapes(min_dims=0, max_dims=3, max_side=4)),
        max_size=4,
    ),
    meta=st.dictionaries(st.text(max_size=5), st.integers() | st.text(max_size=5), max_size=3),
)
def test_encode_decode_property(arrays, meta):
    tensors = {f"t{i}": a for i, a in enumerate(arrays)}
    buf = encode(tensors, meta)
    back, back_meta = decode(buf)
    assert back_meta == meta
    for k, a in tensors.items():
        assert np.array_equal(back[k], a, equal_nan=a.dtype.kind == "f")
    assert encode(back, back_meta) == buf


@pytest.mark.parametrize("corrupt", [
    lambda b: b"NOTACKPT" + b[8:],
    lambda b: b[:8] + struct.pack("<I", 99) + b[12:],
    lambda b: b[:40] + bytes([b[40] ^ 0xFF]) + b[41:],
    lambda b: b[:-10],
    lambda b: b"",
])
def test_corruption_is_detected(corrupt):
    buf = encode({"w": np.ones(8)}, {"x": 1})
    with pytest.raises(CheckpointError):
        decode(corrupt(buf))


def test_failed_write_leaves_previous_file(tmp_path, monkeypatch):
    path = tmp_path / "ckpt"
    save_checkpoint(path, {"w": np.ones(2)}, {})
    before = path.read_bytes()

    def boom(*_a, **_k):
        raise OSError("disk full")

    monkeypatch.setattr("os.replace", boom)
    with pytest.raises(OSError):
        save_checkpoint(path, {"w": np.zeros(2)}, {})
    assert path.read_bytes() == before
    assert [p.name for p in tmp_path.iterdir()] == ["ckpt"]


def test_train_state_round_trip(tmp_path):
    cfg = tiny_config()
    rng = np.random.default_rng(4)
    state = TrainState.create(init_weights(cfg, rng, np.float32), rng)
    batch = random_batch(np.random.default_rng(0), cfg)
    _, _, grads = loss_and_grads(state.weights, batch, cfg)
    state = optimizer_step(state, grads, TrainConfig(), 1e-3)
    save_train_state(tmp_path / "s", state, {"model": {"mode": "async"}}, epoch=3)
    back, config, epoch = load_train_state(tmp_path / "s")
    assert epoch == 3 and back.step == 1 and config == {"model": {"mode": "async"}}
    for group in ("m", "v"):
        a, b = getattr(state, group), getattr(back, group)
        assert all(np.array_equal(a[k], b[k]) for k in a)
    wa, wb = state.weights.named_tensors(), back.weights.named_tensors()
    assert all(np.array_equal(wa[k], wb[k]) and wa[k].dtype == wb[k].dtype for k in wa)
    # the generator continues exactly where it stopped
    assert np.array_equal(state.rng.random(5), back.rng.random(5))


def test_plain_container_is_not_a_train_state(tmp_path):
    save_checkpoint(tmp_path / "c", {"w": np.ones(1)}, {})
    with pytest.raises(CheckpointError):
        load_train_state(tmp_path / "c")
