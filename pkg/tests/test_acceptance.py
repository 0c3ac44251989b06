"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line (see ``acceptance_log``) before it
asserts, so the summary at the end of the run lists every criterion.
"""

import json
import time

import numpy as np
import pytest
import torch

import oracles
from acceptance_log import record
from isoem.cli import main
from isoem.evaluate import ReconstructionReport, evaluate_synthetic, simulate_anisotropic
from isoem.losses import LossConfig, l1_loss, pdl_loss, projection_directions, total_loss
from isoem.metrics import psnr, ssim
from isoem.model import PROFILES, ModelConfig, WindowAttention, init_model, window_merge, window_partition
from isoem.reconstruct import ReconstructionOptions, blend_tiles, reconstruct, restack_planes, slice_axial_planes, tile_plane
from isoem.synth import DegradationConfig, PairStream, PatchSamplingConfig, generate_phantom_volume
from isoem.trainer import TrainConfig, train
from isoem.volume_io import Volume, load_volume, save_volume

SEEDS = range(100)


def test_structural_identities(tmp_path):
    failures = {"window": 0, "slice": 0, "tile": 0, "save/load": 0}
    for seed in SEEDS:
        r = np.random.default_rng(seed)
        m = int(r.integers(1, 6))
        h, w = m * int(r.integers(1, 5)), m * int(r.integers(1, 5))
        x = torch.from_numpy(r.standard_normal((int(r.integers(1, 3)), h, w, int(r.integers(1, 5)))))
        failures["window"] += not torch.equal(window_merge(window_partition(x, m), m, h, w), x)

        vol = r.random(tuple(int(n) for n in r.integers(1, 12, 3)))
        for o in ("xz", "yz"):
            failures["slice"] += not np.array_equal(restack_planes(slice_axial_planes(vol, o), o), vol)

        img = r.random((int(r.integers(1, 120)), int(r.integers(1, 120))))
        overlap = int(r.integers(0, 12))
        tile = 2 * overlap + int(r.integers(1, 40))
        tiles, grid = tile_plane(img, tile, overlap)
        failures["tile"] += not np.array_equal(blend_tiles(tiles, grid), img)

        fmt = (".tif", ".h5", ".raw")[seed % 3]
        shape = tuple(int(n) for n in r.integers(1, 9, 3))
        if seed % 2:
            data = r.integers(0, 256, shape, dtype=np.uint8)
        else:
            data = r.random(shape).astype(np.float32)
        spacing = tuple(float(s) for s in r.uniform(0.5, 80.0, 3))
        back = load_volume(save_volume(Volume(data, spacing), tmp_path / f"v{seed}{fmt}"))
        failures["save/load"] += not (
            back.voxels.dtype == data.dtype and np.array_equal(back.voxels, data) and back.spacing == spacing
        )
    ok = not any(failures.values())
    record("structural identities (100 seeds each)", ok, f"failures {failures}")
    assert ok


def test_attention_correctness():
    torch.manual_seed(0)
    worst_row = 0.0
    for m, dim, heads in ((2, 4, 2), (4, 8, 2), (3, 6, 3), (8, 16, 4)):
        att = WindowAttention(dim, m, heads).double()
        with torch.no_grad():
            att.relative_position_bias_table.normal_(0, 3)
        x = torch.randn(5, m * m, dim, dtype=torch.float64) * 10
        _, attn = att.attend(x)
        assert torch.all(attn >= 0)
        worst_row = max(worst_row, (attn.sum(-1) - 1).abs().max().item())

    # zero query projection and zero bias: constant logits
    att = WindowAttention(8, 4, 2).double()
    with torch.no_grad():
        att.q.weight.zero_()
    x = torch.randn(3, 16, 8, dtype=torch.float64)
    out, attn = att.attend(x)
    uniform = bool(torch.all(attn == attn[0, 0, 0, 0])) and attn[0, 0, 0, 0].item() == pytest.approx(1 / 16, abs=0)
    v = att.v(x)
    mean_err = (out - v.mean(dim=1, keepdim=True).expand_as(v)).abs().max().item()

    # single-pixel windows
    att1 = WindowAttention(6, 1, 3).double()
    x1 = torch.randn(7, 1, 6, dtype=torch.float64)
    out1, attn1 = att1.attend(x1)
    m1 = torch.equal(out1, att1.v(x1)) and torch.equal(attn1, torch.ones_like(attn1))

    ok = worst_row < 1e-6 and uniform and mean_err < 1e-12 and m1
    record("attention correctness", ok,
           f"max |row sum - 1| {worst_row:.1e}; uniform {uniform}, mean err {mean_err:.1e}; M=1 identity {m1}")
    assert ok


def test_gradient_suite():
    cfg = ModelConfig(base_channels=4, levels=2, window_size=2, heads_per_level=(2, 2), blocks_per_level=1)
    model = init_model(cfg, seed=0, dtype=torch.float64)
    g = torch.Generator().manual_seed(0)
    with torch.no_grad():
        # random values everywhere (norm scales, bias tables, head) so no path is trivially zero
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64) * 0.5)
    x = torch.rand(2, 1, 8, 8, generator=g, dtype=torch.float64)
    gt = torch.rand(2, 1, 8, 8, generator=g, dtype=torch.float64)
    loss_cfg = LossConfig(alpha=0.01)
    directions = torch.from_numpy(projection_directions(loss_cfg))

    def loss():
        return total_loss(model(x), gt, loss_cfg, directions)

    model.zero_grad()
    loss().backward()
    named = [(n, p) for n, p in model.named_parameters()]
    r = np.random.default_rng(0)
    picks = r.choice(len(named), size=24, replace=len(named) < 24)
    h = 1e-6
    errs = []
    for k in picks:
        name, p = named[int(k)]
        idx = tuple(int(r.integers(s)) for s in p.shape)
        analytic = p.grad[idx].item()
        with torch.no_grad():
            old = p[idx].item()
            p[idx] = old + h
            up = loss().item()
            p[idx] = old - h
            down = loss().item()
            p[idx] = old
        numeric = (up - down) / (2 * h)
        errs.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-7))
    worst = max(errs)
    ok = len(errs) >= 20 and worst < 1e-3
    record("gradient suite (C=4, K=2, M=2, 8x8, float64)", ok, f"{len(errs)} parameters, max rel err {worst:.2e}")
    assert ok


def test_loss_oracles():
    cfg = LossConfig()
    d = projection_directions(cfg)
    worst = {"l1": 0.0, "pdl": 0.0, "ssim": 0.0, "psnr": 0.0}
    zero_ok = True
    alpha_ok = True
    for seed in range(20):
        r = np.random.default_rng(seed)
        a, b = r.random((8, 8)), r.random((8, 8))
        ta, tb = torch.from_numpy(a), torch.from_numpy(b)
        worst["l1"] = max(worst["l1"], abs(l1_loss(ta, tb).item() - oracles.l1(a, b)))
        worst["pdl"] = max(worst["pdl"], abs(pdl_loss(ta, tb, cfg).item() - oracles.pdl(a, b, d, 4)))
        worst["ssim"] = max(worst["ssim"], abs(ssim(a, b) - oracles.ssim(a, b)))
        worst["psnr"] = max(worst["psnr"], abs(psnr(a, b) - oracles.psnr(a, b)))
        zero_ok &= l1_loss(ta, ta).item() == 0 and pdl_loss(ta, ta, cfg).item() == 0
        zero_ok &= total_loss(ta, ta, cfg).item() == 0
        alpha_ok &= total_loss(ta, tb, LossConfig(alpha=0)).item() == l1_loss(ta, tb).item()
    ok = max(worst.values()) < 1e-10 and zero_ok and alpha_ok
    record("loss oracles", ok, f"max abs diff {{{', '.join(f'{k}: {v:.1e}' for k, v in worst.items())}}}; "
           f"zero at equality {zero_ok}; alpha=0 is l1 {alpha_ok}")
    assert ok


def test_baseline_consistency(tmp_path):
    gt = tmp_path / "gt.tif"
    assert main(["phantom", "--size", "64", "--seed", "21", "--out", str(gt)]) == 0
    out = tmp_path / "report"
    code = main(["evaluate", "--input", str(gt), "--identity-model", "--out", str(out)])
    rep = ReconstructionReport.from_dict(json.loads((out / "report.json").read_text()))
    c, m = rep.row("cubic"), rep.row("model")
    ok = code == 0 and c.psnr == m.psnr and c.ssim == m.ssim
    record("baseline consistency (identity stub)", ok,
           f"cubic {c.psnr:.4f} dB / {c.ssim:.4f}, model {m.psnr:.4f} dB / {m.ssim:.4f}")
    assert ok


# desk-scale recipe for the tiny profile; see README
DESK_STEPS = 2000
DESK_TRAIN = TrainConfig(lr=1e-3, batch_size=8, total_steps=DESK_STEPS, seed=0)
DESK_SAMPLING = PatchSamplingConfig(patch_size=32)
DESK_DEGRADATION = DegradationConfig(rho=3, seed=5)
TRAIN_PHANTOM_SEED, HELD_OUT_PHANTOM_SEED = 101, 202


@pytest.mark.slow
def test_end_to_end_desk_scale():
    t0 = time.perf_counter()
    iso_train = generate_phantom_volume(64, seed=TRAIN_PHANTOM_SEED)
    aniso = simulate_anisotropic(iso_train, DESK_DEGRADATION)
    assert aniso.spacing == (45.0, 15.0, 15.0)
    stream = PairStream(aniso, DESK_SAMPLING, DESK_DEGRADATION)
    model = init_model(PROFILES["tiny"], seed=0)
    train(model, stream, LossConfig(), DESK_TRAIN)
    held_out = generate_phantom_volume(64, seed=HELD_OUT_PHANTOM_SEED)
    report, _ = evaluate_synthetic(held_out, DESK_DEGRADATION, model=model)
    elapsed = time.perf_counter() - t0
    c, m = report.row("cubic"), report.row("model")
    dp, ds = m.psnr - c.psnr, m.ssim - c.ssim
    ok = dp >= 0.2 and ds >= -0.05 and elapsed <= 600
    record("end-to-end desk scale (rho=3, held-out phantom)", ok,
           f"PSNR {c.psnr:.2f} -> {m.psnr:.2f} dB ({dp:+.2f}), SSIM {c.ssim:.4f} -> {m.ssim:.4f} ({ds:+.4f}), "
           f"{DESK_STEPS} steps, {elapsed:.0f} s")
    assert ok


def test_overfit_smoke():
    v = generate_phantom_volume(32, seed=3)
    pair = PairStream(v, PatchSamplingConfig(patch_size=32), DegradationConfig(rho=3, seed=0))[0]
    model = init_model(PROFILES["tiny"], seed=0)
    ckpt = train(model, [pair] * 200, LossConfig(), TrainConfig(lr=1e-3, batch_size=1, total_steps=200, augment=False))
    first, last = ckpt.history[0]["loss"], ckpt.history[-1]["loss"]
    ok = first / last >= 10
    record("overfit smoke test (200 steps)", ok, f"loss {first:.4f} -> {last:.5f}, {first / last:.1f}x")
    assert ok


def test_determinism(tmp_path):
    vol = simulate_anisotropic(generate_phantom_volume(32, seed=9), DegradationConfig(rho=3))
    src = save_volume(vol, tmp_path / "aniso.tif")
    gt = tmp_path / "gt.tif"
    main(["phantom", "--size", "32", "--seed", "9", "--out", str(gt)])
    flags = ["--profile", "tiny", "--steps", "20", "--set", "train.batch_size=4", "--set", "sampling.patch_size=16",
             "--set", "train.lr=0.001", "--seed", "3"]
    ev = ["--set", "reconstruct.tile=32", "--set", "reconstruct.tile_overlap=4"]
    codes = []
    for run in ("a", "b"):
        codes.append(main(["train", "--input", str(src), "--out", str(tmp_path / f"{run}.pt"), *flags]))
        codes.append(main(["evaluate", "--input", str(gt), "--out", str(tmp_path / f"rep_{run}"), *flags, *ev]))
    same_ckpt = (tmp_path / "a.pt").read_bytes() == (tmp_path / "b.pt").read_bytes()
    same_rep = all(
        (tmp_path / "rep_a" / f).read_bytes() == (tmp_path / "rep_b" / f).read_bytes()
        for f in ("report.json", "report.txt", "preview_model.png")
    )
    ok = codes == [0] * 4 and same_ckpt and same_rep
    record("determinism (cmd_train, cmd_evaluate)", ok, f"checkpoints identical {same_ckpt}, reports identical {same_rep}")
    assert ok


def test_non_integer_rho_geometry():
    v = Volume(np.random.default_rng(0).random((10, 32, 32)).astype(np.float32), (50.0, 15.0, 15.0))
    model = init_model(PROFILES["tiny"], seed=0)
    out = reconstruct(v, model, ReconstructionOptions())
    ok = out.shape == (33, 32, 32) and out.spacing == (15.0, 15.0, 15.0)
    record("non-integer rho geometry", ok, f"(10,32,32) @ (50,15,15) -> {out.shape} @ {out.spacing}")
    assert ok
