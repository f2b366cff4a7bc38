import csv

import numpy as np
import pytest
from conftest import SMALL

from freectl.dataset import sample_dataset, stack
from freectl.model import DiTModel
from freectl.numerics import SeededRng, grad_check
from freectl.trainer import (
    FORMAT_VERSION,
    MAGIC,
    CheckpointError,
    TrainConfig,
    TrainingError,
    checkpoint_bytes,
    flow_matching_loss,
    fm_loss,
    load_checkpoint,
    save_checkpoint,
    train,
)


def _data(n=16, size=8, seed=0):
    r = SeededRng(seed)
    return r.random((n, size, size, 3)), r.integers(0, SMALL.num_classes - 1, (n,))


class EpsOracle:
    """Predicts exactly eps - x0 by replaying the loss's RNG draws."""

    config = SMALL
    dtype = np.float64
    encode = staticmethod(DiTModel.encode)

    def __init__(self, images, seed):
        r = SeededRng(seed)
        B = len(images)
        r.random((B,))
        self.eps = r.normal(images.shape, np.float64)
        self.x0 = self.encode(images)

    def forward(self, x, t, labels, tap=None, cache=False):
        return self.eps - self.x0


def test_loss_zero_for_oracle():
    X, Y = _data()
    loss, g = fm_loss(EpsOracle(X, 7), X, Y, SeededRng(7), grads=False)
    assert loss == 0.0 and g is None


def test_loss_gradient_matches_finite_differences(small_model):
    X, Y = _data(4)

    names = list(small_model.params)

    def f(_):
        loss, g = fm_loss(small_model, X, Y, SeededRng(3), label_drop_prob=0.5)
        return loss, [g[n] for n in names]

    rep = grad_check(f, [small_model.params[n] for n in names], tolerance=1e-4, max_probes=8)
    assert rep.passed, rep.max_rel_error


def test_duplicated_batch_same_loss(small_model):
    X, Y = _data(3)
    r = SeededRng(0)
    x0 = small_model.encode(X)
    sigma, eps = r.random((3,)), r.normal(X.shape, np.float64)
    one = flow_matching_loss(small_model, x0, sigma, eps, Y, grads=False)[0]
    two = flow_matching_loss(small_model, np.concatenate([x0, x0]), np.concatenate([sigma, sigma]),
                             np.concatenate([eps, eps]), np.concatenate([Y, Y]), grads=False)[0]
    assert one == pytest.approx(two, rel=1e-12)


def test_non_finite_loss_aborts(small_model):
    X, Y = _data(2)
    small_model.params["out.b"][:] = np.nan
    with pytest.raises(TrainingError):
        fm_loss(small_model, X, Y, SeededRng(0))


def test_sigma_sampling_option(small_model):
    X, Y = _data(2)
    fm_loss(small_model, X, Y, SeededRng(0), grads=False, sigma_sampling="logit_normal")
    with pytest.raises(ValueError):
        fm_loss(small_model, X, Y, SeededRng(0), sigma_sampling="beta")


def test_zero_steps_checkpoint_equals_init(tmp_path):
    m = DiTModel(SMALL, seed=4)
    init = checkpoint_bytes(m)
    X, Y = _data()
    out = train(m, X, Y, TrainConfig(steps=0), checkpoint_path=tmp_path / "c.fctl")
    assert (tmp_path / "c.fctl").read_bytes() == init
    assert out is m


def test_training_reduces_loss_and_is_deterministic(tmp_path):
    items = sample_dataset(SeededRng(0), 64)
    X, Y = stack(items)
    X = X[:, ::4, ::4]  # 8x8 thumbnails for the small geometry
    Y = Y % (SMALL.num_classes - 1)
    cfg = TrainConfig(steps=120, batch_size=8, lr=3e-3, warmup=10, log_every=20, ema_decay=None)
    a = train(DiTModel(SMALL, seed=0), X, Y, cfg, log_path=tmp_path / "log.csv")
    b = train(DiTModel(SMALL, seed=0), X, Y, cfg)
    assert checkpoint_bytes(a) == checkpoint_bytes(b)
    rows = list(csv.DictReader(open(tmp_path / "log.csv")))
    assert list(rows[0]) == ["step", "loss", "wall_ms"]
    assert [int(r["step"]) for r in rows] == list(range(20, 121, 20))
    assert float(rows[-1]["loss"]) < float(rows[0]["loss"])


def test_ema_model_returned():
    X, Y = _data()
    m = DiTModel(SMALL, seed=0)
    out = train(m, X, Y, TrainConfig(steps=3, batch_size=4, ema_decay=0.5))
    assert out is not m
    assert not np.array_equal(out.params["out.w"], m.params["out.w"])


def test_divergence_aborts():
    X, Y = _data()
    m = DiTModel(SMALL, seed=0)
    m.params["out.b"][:] = 1e3
    with pytest.raises(TrainingError, match="diverged"):
        train(m, X, Y, TrainConfig(steps=150, lr=1e-12, warmup=0))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(label_drop_prob=1.0)


def test_checkpoint_roundtrip_bitwise(tmp_path):
    m = DiTModel(SMALL, seed=9)
    p1 = save_checkpoint(m, tmp_path / "a.fctl")
    back = load_checkpoint(p1)
    assert back.config == m.config
    assert all(np.array_equal(back.params[k], v) for k, v in m.params.items())
    p2 = save_checkpoint(back, tmp_path / "b.fctl")
    assert p1.read_bytes() == p2.read_bytes()
    assert p1.read_bytes()[:4] == MAGIC


def test_checkpoint_corruption_rejected(tmp_path):
    raw = checkpoint_bytes(DiTModel(SMALL, seed=9))
    bad = tmp_path / "x.fctl"
    for blob, msg in [(raw[:-7], None), (b"XXXX" + raw[4:], "magic"),
                      (raw[:4] + (FORMAT_VERSION + 1).to_bytes(4, "little") + raw[8:], "version"),
                      (raw[:100] + bytes([raw[100] ^ 0xFF]) + raw[101:], "CRC")]:
        bad.write_bytes(blob)
        with pytest.raises(CheckpointError, match=msg):
            load_checkpoint(bad)
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.fctl")


def test_checkpoint_layout_is_little_endian_f32(tmp_path):
    import json
    import struct
    import zlib

    m = DiTModel(SMALL, seed=2)
    raw = checkpoint_bytes(m)
    assert struct.unpack("<I", raw[4:8])[0] == FORMAT_VERSION
    n = struct.unpack("<I", raw[8:12])[0]
    header = json.loads(raw[12 : 12 + n])
    assert header == m.config.to_dict()
    off = 12 + n
    count = struct.unpack("<I", raw[off : off + 4])[0]
    assert count == len(m.params)
    off += 4
    name_len = struct.unpack("<I", raw[off : off + 4])[0]
    name = raw[off + 4 : off + 4 + name_len].decode()
    first = next(iter(m.params))
    assert name == first
    off += 4 + name_len
    tag, rank = raw[off], struct.unpack("<I", raw[off + 1 : off + 5])[0]
    dims = struct.unpack(f"<{rank}I", raw[off + 5 : off + 5 + 4 * rank])
    assert tag == 1 and dims == m.params[first].shape
    start = off + 5 + 4 * rank
    payload = np.frombuffer(raw[start : start + 4 * int(np.prod(dims))], dtype="<f4")
    assert np.array_equal(payload.reshape(dims), m.params[first])
    assert struct.unpack("<I", raw[-4:])[0] == zlib.crc32(raw[:-4])
