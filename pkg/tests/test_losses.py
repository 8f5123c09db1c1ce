import numpy as np
import pytest

import dynsplat.losses as L
from dynsplat.losses import LossWeights, NonFiniteLossError, recon_loss, sky_loss, total_loss, velocity_reg
from dynsplat.tensor import Tensor


def t64(x):
    return Tensor(np.asarray(x, dtype=np.float64))


@pytest.fixture(autouse=True)
def _reset():
    L.reset_counters()
    L.register_perceptual_hook(None)
    yield
    L.register_perceptual_hook(None)


def test_weights_validation_and_round_trip():
    w = LossWeights(lambda_reg=0.0)
    assert LossWeights.from_dict(w.to_dict()) == w
    with pytest.raises(ValueError):
        LossWeights(lambda_sky=-0.1)


# -- reconstruction ------------------------------------------------------------


def test_recon_perfect_fit_is_zero(rng):
    img = rng.uniform(-1, 1, (4, 4, 3))
    depth = rng.uniform(1, 5, (4, 4))
    valid = np.ones((4, 4), bool)
    out = recon_loss(t64(img), img, t64(depth), depth, valid)
    assert out.item() == pytest.approx(0.0, abs=1e-12)


def test_recon_rgb_constant_offset():
    gt = np.zeros((5, 5, 3))
    pred = np.full((5, 5, 3), 0.1)
    out = recon_loss(t64(pred), gt, t64(np.ones((5, 5))), np.ones((5, 5)), np.zeros((5, 5), bool))
    assert out.item() == pytest.approx(0.01)


def test_recon_depth_normalization():
    gt_d = np.full((4, 4), 10.0)
    gt_d[0, 0] = 10.0
    pred_d = gt_d + 1.0
    img = np.zeros((4, 4, 3))
    out = recon_loss(t64(img), img, t64(pred_d), gt_d, np.ones((4, 4), bool))
    assert out.item() == pytest.approx(0.1)


def test_recon_empty_depth_counts_warning():
    img = np.zeros((2, 2, 3))
    before = L.depth_empty_count
    out = recon_loss(t64(img), img, t64(np.zeros((2, 2))), np.zeros((2, 2)), np.zeros((2, 2), bool))
    assert out.item() == 0.0
    assert L.depth_empty_count == before + 1


def test_recon_shape_mismatch():
    with pytest.raises(ValueError):
        recon_loss(t64(np.zeros((2, 2, 3))), np.zeros((3, 2, 3)), t64(np.zeros((2, 2))), np.zeros((2, 2)),
                   np.zeros((2, 2), bool))


def test_perceptual_hook_gated_by_warmup():
    img = np.zeros((2, 2, 3))
    pred = np.full((2, 2, 3), 0.5)
    calls = []

    def hook(p, g):
        calls.append(1)
        return t64(2.0)

    L.register_perceptual_hook(hook)
    w = LossWeights(lpips_warmup_steps=100)
    early = recon_loss(t64(pred), img, t64(np.ones((2, 2))), np.ones((2, 2)), np.ones((2, 2), bool), w, step=99)
    late = recon_loss(t64(pred), img, t64(np.ones((2, 2))), np.ones((2, 2)), np.ones((2, 2), bool), w, step=100)
    assert len(calls) == 1
    assert late.item() == pytest.approx(early.item() + 0.05 * 2.0)


# -- sky ---------------------------------------------------------------------------


def test_sky_perfect():
    opac = np.array([[0.0, 1.0]])
    mask = np.array([[1, 0]])
    assert sky_loss(t64(opac), mask).item() == pytest.approx(0.0)


def test_sky_all_wrong():
    opac = np.ones((3, 3))
    mask = np.ones((3, 3))
    assert sky_loss(t64(opac), mask).item() == pytest.approx(1.0)


def test_sky_half_arithmetic():
    opac = np.full((2, 2), 0.5)
    mask = np.array([[1, 1], [0, 0]])
    assert sky_loss(t64(opac), mask).item() == pytest.approx(0.5)


def test_sky_mse_toggle():
    opac = np.full((1, 2), 0.5)
    mask = np.array([[1, 1]])
    assert sky_loss(t64(opac), mask, mse=True).item() == pytest.approx(0.25)


# -- velocity regularization ----------------------------------------------------------


def test_velocity_reg_zero():
    assert velocity_reg(t64(np.zeros((5, 6)))).item() == 0.0


def test_velocity_reg_example():
    v = np.array([[0.0, 0, 0, 1.0, 1.0, 1.0]])  # v_minus = 0, v_plus = (1,1,1)
    assert velocity_reg(t64(v)).item() == pytest.approx(0.5)


def test_velocity_reg_homogeneity(rng):
    v = rng.normal(size=(7, 6))
    base = velocity_reg(t64(v)).item()
    assert velocity_reg(t64(2 * v)).item() == pytest.approx(4 * base)


def test_velocity_reg_gradient_linear(rng):
    v = Tensor(rng.normal(size=(4, 6)), dtype=np.float64)
    v.requires_grad = True
    velocity_reg(v).backward()
    np.testing.assert_allclose(v.grad, 2 * v.numpy() / v.numpy().size, atol=1e-12)


def test_velocity_reg_empty():
    assert velocity_reg(t64(np.zeros((0, 6)))).item() == 0.0


# -- total ------------------------------------------------------------------------------


def test_total_zero():
    parts = {"recon": t64(0.0), "sky": t64(0.0), "reg": t64(0.0)}
    assert total_loss(parts).item() == 0.0


def test_total_paper_weights():
    parts = {"recon": t64(1.0), "sky": t64(1.0), "reg": t64(1.0)}
    assert total_loss(parts, LossWeights()).item() == pytest.approx(1.105)


def test_total_lambda_reg_zero_path():
    parts = {"recon": t64(1.0), "sky": t64(0.0), "reg": t64(100.0)}
    out = total_loss(parts, LossWeights(lambda_reg=0.0))
    assert out.item() == pytest.approx(1.0)


def test_total_nan_aborts():
    parts = {"recon": t64(np.nan), "sky": t64(0.0), "reg": t64(0.0)}
    with pytest.raises(NonFiniteLossError) as exc:
        total_loss(parts)
    assert "recon" in str(exc.value)


def test_total_inf_aborts():
    parts = {"recon": t64(np.inf)}
    with pytest.raises(NonFiniteLossError):
        total_loss(parts)


def test_every_term_nonnegative(rng):
    img_gt = rng.uniform(-1, 1, (3, 3, 3))
    img_pred = rng.uniform(-1, 1, (3, 3, 3))
    d_gt = rng.uniform(1, 9, (3, 3))
    d_pred = rng.uniform(1, 9, (3, 3))
    assert recon_loss(t64(img_pred), img_gt, t64(d_pred), d_gt, np.ones((3, 3), bool)).item() >= 0
    assert sky_loss(t64(rng.uniform(0, 1, (3, 3))), rng.integers(0, 2, (3, 3))).item() >= 0
    assert velocity_reg(t64(rng.normal(size=(5, 6)))).item() >= 0
