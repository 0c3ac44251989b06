import json
import math

import numpy as np
import pytest
import torch

from isoem.errors import ConfigError, NumericalError, VolumeIOError
from isoem.losses import LossConfig
from isoem.metrics import psnr
from isoem.model import PROFILES, IdentityModel, init_model
from isoem.synth import DegradationConfig, PairStream, PatchSamplingConfig, TrainingPair
from isoem.trainer import (
    TrainConfig,
    augment_pair,
    load_checkpoint,
    save_checkpoint,
    train,
    validate,
)

TINY = PROFILES["tiny"]


@pytest.fixture(scope="module")
def stream():
    from isoem.synth import generate_phantom_volume

    v = generate_phantom_volume(32, seed=3)
    return PairStream(v, PatchSamplingConfig(patch_size=16), DegradationConfig(rho=3, seed=1))


def params(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def same(a, b):
    return all(torch.equal(a[k], b[k]) for k in a)


def run(stream, steps=6, **kw):
    m = init_model(TINY, seed=0)
    cfg = TrainConfig(lr=1e-3, batch_size=4, total_steps=steps, **kw)
    ckpt = train(m, stream, LossConfig(), cfg)
    return m, ckpt


def test_deterministic_runs(stream):
    m1, c1 = run(stream)
    m2, c2 = run(stream)
    assert same(params(m1), params(m2))
    assert [r["loss"] for r in c1.history] == [r["loss"] for r in c2.history]


def test_lr_zero_leaves_parameters(stream):
    m = init_model(TINY, seed=0)
    before = params(m)
    train(m, stream, LossConfig(), TrainConfig(lr=0.0, batch_size=2, total_steps=5))
    assert same(before, params(m))


def test_parameters_move(stream):
    m, _ = run(stream, steps=2)
    assert not same(params(init_model(TINY, seed=0)), params(m))


def test_resume_is_bit_exact(stream, tmp_path):
    full, _ = run(stream, steps=8)
    m = init_model(TINY, seed=0)
    cfg = TrainConfig(lr=1e-3, batch_size=4, total_steps=8)
    half = train(m, stream, LossConfig(), TrainConfig(lr=1e-3, batch_size=4, total_steps=4))
    path = save_checkpoint(half, tmp_path / "half.pt")
    resumed = load_checkpoint(path)
    m2 = init_model(TINY, seed=99)
    train(m2, stream, LossConfig(), cfg, resume=resumed)
    assert same(params(full), params(m2))


def test_resume_from_periodic_checkpoint_with_cosine(stream, tmp_path):
    # the cosine schedule depends on total_steps, so resume from a mid-run snapshot
    cfg = TrainConfig(lr=1e-3, batch_size=4, total_steps=6, lr_schedule="cosine", checkpoint_every=3)
    full = init_model(TINY, seed=0)
    ckpt = train(full, stream, LossConfig(), cfg, checkpoint_dir=tmp_path)
    mid = load_checkpoint(tmp_path / "step_0000003.pt")
    m = init_model(TINY, seed=5)
    resumed = train(m, stream, LossConfig(), cfg, resume=mid)
    assert same(params(full), params(m))
    assert [r["loss"] for r in resumed.history] == [r["loss"] for r in ckpt.history]
    assert ckpt.history[0]["lr"] == pytest.approx(1e-3)
    assert ckpt.history[-1]["lr"] < ckpt.history[0]["lr"]


def test_stream_exhaustion():
    pairs = [TrainingPair(np.zeros((8, 8), np.float32), np.zeros((8, 8), np.float32))] * 5
    with pytest.raises(ConfigError, match="exhausted"):
        train(init_model(TINY), pairs, LossConfig(), TrainConfig(batch_size=2, total_steps=3))


def test_non_finite_loss_dumps_batch(stream, tmp_path):
    m = init_model(TINY)
    with torch.no_grad():
        m.head.bias.fill_(float("inf"))
    with pytest.raises(NumericalError):
        train(m, stream, LossConfig(), TrainConfig(batch_size=2, total_steps=2), checkpoint_dir=tmp_path)
    dumps = list(tmp_path.glob("nonfinite_step*.npz"))
    assert len(dumps) == 1
    data = np.load(dumps[0])
    assert data["lr"].shape == (2, 1, 16, 16)


def test_metrics_log_and_periodic_checkpoints(stream, tmp_path):
    val = list(PairStream(stream.volume, stream.sampling, stream.degradation, length=4, domain=1))
    log = tmp_path / "m.jsonl"
    m = init_model(TINY)
    train(m, stream, LossConfig(), TrainConfig(lr=1e-3, batch_size=2, total_steps=4, val_every=2, checkpoint_every=2),
          val_pairs=val, checkpoint_dir=tmp_path / "ck", metrics_log=log)
    rows = [json.loads(line) for line in log.read_text().splitlines()]
    assert [r["step"] for r in rows] == [1, 2, 3, 4]
    assert "val_psnr" in rows[1] and "val_psnr" not in rows[0]
    assert {"loss", "l1", "pdl", "lr"} <= set(rows[0])
    assert sorted(p.name for p in (tmp_path / "ck").iterdir()) == ["step_0000002.pt", "step_0000004.pt"]
    assert load_checkpoint(tmp_path / "ck" / "step_0000002.pt").step == 2


def test_checkpoint_roundtrip_and_bytes(stream, tmp_path):
    m, ckpt = run(stream, steps=2)
    a = save_checkpoint(ckpt, tmp_path / "a.pt").read_bytes()
    b = save_checkpoint(ckpt, tmp_path / "b.pt").read_bytes()
    assert a == b
    back = load_checkpoint(tmp_path / "a.pt")
    assert back.model_config == TINY and back.step == 2
    assert np.array_equal(back.directions, ckpt.directions)
    x = torch.rand(1, 1, 16, 16)
    assert torch.equal(back.build_model()(x), m(x))


def test_corrupt_checkpoint(tmp_path):
    p = tmp_path / "bad.pt"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(VolumeIOError):
        load_checkpoint(p)
    with pytest.raises(VolumeIOError):
        load_checkpoint(tmp_path / "missing.pt")


def test_augment_covers_symmetries():
    a = np.arange(9.0).reshape(3, 3)
    seen = set()
    for s in range(200):
        lr, gt = augment_pair(a, a + 100, np.random.default_rng(s))
        assert np.array_equal(gt - 100, lr)
        seen.add(lr.tobytes())
    assert len(seen) == 8


class _Oracle(torch.nn.Module):
    """Returns the ground truth stored for each input."""

    def __init__(self, pairs):
        super().__init__()
        self.lookup = {p.lr.tobytes(): p.gt for p in pairs}

    def forward(self, x):
        out = [torch.from_numpy(self.lookup[np.float64(img[0]).astype(np.float32).tobytes()]) for img in x.numpy()]
        return torch.stack(out)[:, None].to(x.dtype)


def _val_pairs(stream, n=6):
    return list(PairStream(stream.volume, stream.sampling, stream.degradation, length=n, domain=1))


def test_validate_perfect_stub(stream):
    pairs = _val_pairs(stream)
    out = validate(_Oracle(pairs), pairs, LossConfig())
    assert out["loss"] == 0 and out["psnr"] == math.inf


def test_validate_identity_stub_matches_metrics(stream):
    pairs = _val_pairs(stream)
    out = validate(IdentityModel(), pairs, LossConfig())
    expected = psnr(np.stack([p.lr for p in pairs]), np.stack([p.gt for p in pairs]))
    assert out["psnr"] == pytest.approx(expected, abs=1e-9)


def test_validate_is_pure(stream):
    pairs = _val_pairs(stream)
    m = init_model(TINY, zero_head=False)
    before = params(m)
    a, b = validate(m, pairs, LossConfig()), validate(m, pairs, LossConfig())
    assert a == b and same(before, params(m))


def test_validate_empty():
    with pytest.raises(ConfigError):
        validate(IdentityModel(), [], LossConfig())


def test_invalid_train_config():
    for kw in (dict(lr=-1), dict(batch_size=0), dict(total_steps=0), dict(lr_schedule="step")):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)


def test_cosine_schedule():
    cfg = TrainConfig(lr=1.0, total_steps=10, lr_schedule="cosine")
    assert cfg.lr_at(0) == 1.0 and cfg.lr_at(10) == pytest.approx(0.0) and cfg.lr_at(5) == pytest.approx(0.5)
