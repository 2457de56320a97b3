import struct
import zlib

import numpy as np
import pytest

from densetl.densenet import DenseNetConfig, HeadConfig, build_backbone, build_model, freeze_base, param_count
from densetl.model_io import (
    MAGIC,
    BadMagicError,
    ChecksumError,
    ModelFormatError,
    TruncatedPayloadError,
    VersionMismatchError,
    load_checkpoint,
    load_model,
    read_header,
    restore_optimizer,
    save_model,
)
from densetl.nn import one_hot, softmax_cross_entropy
from densetl.optim import Optimizer, OptimizerHyper
from densetl.tensor import Tensor, backward


@pytest.fixture
def model():
    m = build_model(DenseNetConfig.toy(), HeadConfig(neurons=16), seed=5, class_names=["a", "b", "c"])
    freeze_base(m)
    # non-default running stats so the round trip covers them
    for _, buf in m.named_buffers():
        buf[...] = np.random.default_rng(len(buf)).uniform(0.5, 1.5, buf.shape)
    m.metadata = {"note": "x", "epochs_completed": 3}
    return m


def x_batch():
    return Tensor(np.random.default_rng(0).standard_normal((2, 3, 32, 32)))


def test_roundtrip_preserves_everything(tmp_path, model):
    path = save_model(model, tmp_path / "m.dgm")
    back = load_model(path)
    assert param_count(back) == param_count(model)
    for (na, a, ta), (nb, b, tb) in zip(model.state_arrays(), back.state_arrays()):
        assert na == nb and ta == tb
        assert a.tobytes() == b.tobytes()
    assert back.class_names == ["a", "b", "c"]
    assert back.metadata == model.metadata
    assert back.describe() == model.describe()
    assert back.trainable_parameters()[0][0] == model.trainable_parameters()[0][0]
    np.testing.assert_array_equal(back(x_batch()).data, model(x_batch()).data)


def test_backbone_only_roundtrip(tmp_path):
    m = build_backbone(DenseNetConfig.toy(), seed=2)
    back = load_model(save_model(m, tmp_path / "b.dgm"))
    assert back.head is None
    np.testing.assert_array_equal(back.features(x_batch()).data, m.features(x_batch()).data)


def test_layout_preamble_and_crc(tmp_path, model):
    raw = save_model(model, tmp_path / "m.dgm").read_bytes()
    magic, version, hlen = struct.unpack_from("<4sIQ", raw)
    assert magic == MAGIC and version == 1
    payload = raw[16:-4]
    assert struct.unpack("<I", raw[-4:])[0] == zlib.crc32(payload)
    n_floats = sum(a.size for _, a, _ in model.state_arrays())
    assert len(payload) == hlen + 4 * n_floats
    assert read_header(tmp_path / "m.dgm")["seed"] == 5


def test_save_is_deterministic(tmp_path, model):
    a = save_model(model, tmp_path / "a.dgm").read_bytes()
    b = save_model(model, tmp_path / "b.dgm").read_bytes()
    assert a == b


def _corrupt(tmp_path, model, fn):
    path = save_model(model, tmp_path / "m.dgm")
    raw = bytearray(path.read_bytes())
    path.write_bytes(bytes(fn(raw)))
    return path


@pytest.mark.parametrize("mutate,error,code", [
    (lambda r: b"XXXX" + r[4:], BadMagicError, "bad_magic"),
    (lambda r: b"", BadMagicError, "bad_magic"),
    (lambda r: r[:4] + struct.pack("<I", 2) + r[8:], VersionMismatchError, "version_mismatch"),
    (lambda r: r[:-100], TruncatedPayloadError, "truncated_payload"),
    (lambda r: r[:10], TruncatedPayloadError, "truncated_payload"),
    (lambda r: r[:len(r) // 2] + bytes([r[len(r) // 2] ^ 1]) + r[len(r) // 2 + 1:], ChecksumError,
     "checksum_mismatch"),
    (lambda r: r[:-1] + bytes([r[-1] ^ 0xFF]), ChecksumError, "checksum_mismatch"),
])
def test_corruption_categories(tmp_path, model, mutate, error, code):
    path = _corrupt(tmp_path, model, mutate)
    with pytest.raises(error) as info:
        load_model(path)
    assert isinstance(info.value, ModelFormatError)
    assert info.value.code == code


def test_flipped_header_byte_is_checksum_error(tmp_path, model):
    path = _corrupt(tmp_path, model, lambda r: r[:20] + bytes([r[20] ^ 0x40]) + r[21:])
    with pytest.raises(ChecksumError):
        load_model(path)


def _train(model, opt, steps, start=0):
    rng = np.random.default_rng(11)
    x = Tensor(rng.standard_normal((4, 3, 32, 32)))
    y = one_hot([0, 1, 2, 0], 3)
    losses = []
    params = [p for _, p in opt.params]
    for s in range(start, start + steps):
        loss, _ = softmax_cross_entropy(model(x, train=True, rng=np.random.default_rng([3, s])), y)
        opt.step(backward(loss, params))
        losses.append(loss.item())
    return losses


@pytest.mark.parametrize("kind", ["adam", "sgd", "rmsprop"])
def test_resume_reproduces_trajectory_bitwise(tmp_path, kind):
    def fresh():
        m = build_model(DenseNetConfig.toy(), HeadConfig(neurons=16), seed=1)
        return m, Optimizer(m.trainable_parameters(), OptimizerHyper(kind))

    m, opt = fresh()
    straight = _train(m, opt, 6)

    m, opt = fresh()
    first = _train(m, opt, 3)
    path = save_model(m, tmp_path / "c.dgm", opt)
    ckpt = load_checkpoint(path)
    opt2 = restore_optimizer(ckpt, ckpt.model.trainable_parameters())
    assert opt2.state.t == 3
    rest = _train(ckpt.model, opt2, 3, start=3)
    assert np.array(first + rest, dtype=np.float32).tobytes() == np.array(straight, dtype=np.float32).tobytes()


def test_restore_without_optimizer_section(tmp_path, model):
    ckpt = load_checkpoint(save_model(model, tmp_path / "m.dgm"))
    assert ckpt.optimizer_hyper is None
    with pytest.raises(ModelFormatError):
        restore_optimizer(ckpt, ckpt.model.trainable_parameters())
