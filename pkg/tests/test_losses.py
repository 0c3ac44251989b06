import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from isoem.errors import ConfigError
from isoem.losses import LossConfig, l1_loss, patch_vectors, pdl_loss, projection_directions, total_loss

import oracles

CFG = LossConfig()


def t(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


def pair(seed, shape=(8, 8)):
    r = np.random.default_rng(seed)
    return r.random(shape), r.random(shape)


def test_l1_examples():
    g = np.random.default_rng(0).random((2, 8, 8))
    assert l1_loss(t(g), t(g)).item() == 0
    assert l1_loss(t(g + 0.1), t(g)).item() == pytest.approx(0.1, abs=1e-12)
    a = np.zeros((4, 4))
    b = np.zeros((4, 4))
    b[:2] = 1
    assert l1_loss(t(a), t(b)).item() == 0.5


def test_shape_mismatch():
    with pytest.raises(ValueError):
        l1_loss(t(np.zeros((4, 4))), t(np.zeros((4, 5))))
    with pytest.raises(ValueError):
        pdl_loss(t(np.zeros((4, 4))), t(np.zeros((4, 5))), CFG)


def test_pdl_too_small():
    with pytest.raises(ValueError):
        pdl_loss(t(np.zeros((3, 8))), t(np.zeros((3, 8))), CFG)


def test_directions_are_unit_and_frozen():
    d = projection_directions(CFG)
    assert d.shape == (32, 16)
    assert np.allclose(np.linalg.norm(d, axis=1), 1)
    assert np.array_equal(d, projection_directions(LossConfig()))
    assert not np.array_equal(d, projection_directions(LossConfig(seed=1)))


def test_patch_vectors_order():
    img = torch.arange(64.0).view(1, 8, 8)
    v = patch_vectors(img, 4)
    assert v.shape == (1, 4, 16)
    assert torch.equal(v[0, 1], img[0, :4, 4:].flatten())


def test_zero_at_equality():
    a, _ = pair(1, (3, 8, 8))
    assert pdl_loss(t(a), t(a), CFG).item() == 0
    assert total_loss(t(a), t(a), CFG).item() == 0


def test_pdl_symmetric(rng):
    a, b = rng.random((2, 12, 12)), rng.random((2, 12, 12))
    assert pdl_loss(t(a), t(b), CFG).item() == pytest.approx(pdl_loss(t(b), t(a), CFG).item(), abs=1e-15)


def test_pdl_constant_shift_closed_form(rng):
    a = rng.random((16, 16))
    c = 0.07
    u = projection_directions(CFG)
    expected = abs(c) * np.mean(np.abs(u.sum(axis=1)))
    assert pdl_loss(t(a + c), t(a), CFG).item() == pytest.approx(expected, abs=1e-12)


def test_pdl_invariant_to_tile_permutation(rng):
    a = rng.random((8, 8))
    b = a.copy()
    b[:4, :4], b[4:, 4:] = a[4:, 4:].copy(), a[:4, :4].copy()
    assert pdl_loss(t(b), t(a), CFG).item() == pytest.approx(0.0, abs=1e-14)
    assert l1_loss(t(b), t(a)).item() > 0


def test_alpha_zero_is_l1(rng):
    a, b = rng.random((8, 8)), rng.random((8, 8))
    cfg = LossConfig(alpha=0)
    assert total_loss(t(a), t(b), cfg).item() == l1_loss(t(a), t(b)).item()


def test_alpha_monotone(rng):
    a, b = rng.random((8, 8)), rng.random((8, 8))
    vals = [total_loss(t(a), t(b), LossConfig(alpha=x)).item() for x in (0, 0.01, 0.1, 1)]
    assert vals == sorted(vals) and len(set(vals)) == 4


def test_invalid_config():
    with pytest.raises(ConfigError):
        LossConfig(alpha=-1)
    with pytest.raises(ConfigError):
        LossConfig(pdl_projections=0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_total_matches_oracle(seed):
    a, b = pair(seed)
    d = projection_directions(CFG)
    ref = oracles.l1(a, b) + 0.01 * oracles.pdl(a, b, d, 4)
    assert abs(total_loss(t(a), t(b), CFG).item() - ref) < 1e-10


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_nonnegative(seed):
    a, b = pair(seed, (2, 8, 8))
    _, l1, pdl = total_loss(t(a), t(b), CFG, parts=True)
    assert l1.item() >= 0 and pdl.item() >= 0


def test_gradient_wrt_pred():
    a, b = pair(42, (8, 8))
    pred = t(a).requires_grad_(True)
    total_loss(pred, t(b), CFG).backward()
    grad = pred.grad.numpy()
    for idx in [(0, 0), (3, 5), (7, 7), (4, 1)]:
        def f(v, idx=idx):
            x = a.copy()
            x[idx] = v
            return total_loss(t(x), t(b), CFG).item()

        num = oracles.central_difference(f, a[idx], 1e-6)
        assert abs(num - grad[idx]) / max(abs(num), 1e-12) < 1e-4


def test_batch_layouts_agree(rng):
    a, b = rng.random((3, 8, 8)), rng.random((3, 8, 8))
    x = pdl_loss(t(a), t(b), CFG).item()
    y = pdl_loss(t(a)[:, None], t(b)[:, None], CFG).item()
    assert x == y
