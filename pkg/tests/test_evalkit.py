import json

import numpy as np
import pytest

from dynsplat.evalkit import (
    EvalReport,
    depth_rmse,
    dynamic_mask,
    evaluate,
    flow_metrics,
    load_schema,
    psnr,
    ssim,
    validate_schema,
)
from dynsplat.model import Model, ModelConfig
from dynsplat.synthgen import GeneratorConfig, generate_scene, make_clip

TINY_MODEL = ModelConfig(
    patch_size=8, embed_dim=32, depth=1, heads=2, num_motion_tokens=2, motion_embed_dim=8,
    num_cameras=2, image_height=16, image_width=16, decoder_channels=(16, 8, 8),
)
TINY_GEN = GeneratorConfig(width=16, height=16, num_cameras=2, frames_per_clip=5)


# -- psnr --------------------------------------------------------------------------


def test_psnr_identical_capped():
    img = np.random.default_rng(0).uniform(0, 1, (8, 8, 3))
    assert psnr(img, img) == 99.0


def test_psnr_uniform_error():
    gt = np.zeros((10, 10, 3))
    pred = np.full((10, 10, 3), 0.1)
    assert psnr(pred, gt) == pytest.approx(20.0)


def test_psnr_masked_ignores_outside_error():
    gt = np.zeros((4, 4, 3))
    pred = gt.copy()
    pred[0, 0] = 1.0
    mask = np.ones((4, 4), bool)
    mask[0, 0] = False
    assert psnr(pred, gt, mask) == 99.0


def test_psnr_empty_mask_skipped():
    assert psnr(np.zeros((2, 2, 3)), np.zeros((2, 2, 3)), np.zeros((2, 2), bool)) is None


def test_psnr_strictly_decreasing_in_mse():
    gt = np.zeros((6, 6, 3))
    values = [psnr(np.full((6, 6, 3), e), gt) for e in (0.05, 0.1, 0.2, 0.4)]
    assert all(a > b for a, b in zip(values, values[1:]))


# -- ssim ---------------------------------------------------------------------------


def test_ssim_identical():
    img = np.random.default_rng(1).uniform(0, 1, (16, 16, 3))
    assert ssim(img, img) == pytest.approx(1.0)


def test_ssim_negated_structure():
    rng = np.random.default_rng(2)
    img = rng.uniform(0.2, 0.8, (24, 24, 3))
    inverted = 1.0 - img
    assert ssim(img, inverted) < 0


def test_ssim_constant_images_luminance_term():
    a = np.full((16, 16, 3), 0.3)
    b = np.full((16, 16, 3), 0.6)
    la, lb = a[0, 0] @ np.array([0.299, 0.587, 0.114]), b[0, 0] @ np.array([0.299, 0.587, 0.114])
    c1 = 0.01**2
    c2 = 0.03**2
    expected = ((2 * la * lb + c1) * c2) / ((la**2 + lb**2 + c1) * c2)
    assert ssim(a, b) == pytest.approx(expected, rel=1e-6)


def test_ssim_small_image_padding():
    img = np.random.default_rng(3).uniform(0, 1, (4, 4, 3))
    assert ssim(img, img) == pytest.approx(1.0)


# -- depth rmse ------------------------------------------------------------------------


def test_depth_rmse_cases():
    gt = np.full((4, 4), 7.0)
    mask = np.ones((4, 4), bool)
    assert depth_rmse(gt, gt, mask) == 0.0
    assert depth_rmse(gt + 2.0, gt, mask) == pytest.approx(2.0)
    mixed = gt.copy()
    mixed[:2] += 1
    mixed[2:] -= 1
    assert depth_rmse(mixed, gt, mask) == pytest.approx(1.0)
    assert depth_rmse(gt, gt, np.zeros((4, 4), bool)) is None


# -- flow metrics ------------------------------------------------------------------------


def test_flow_metrics_perfect():
    gt = np.random.default_rng(4).normal(size=(50, 3))
    out = flow_metrics(gt, gt)
    assert out["epe3d"] == 0.0
    assert out["acc5"] == 100.0
    assert out["acc10"] == 100.0
    assert out["angular"] == pytest.approx(0.0, abs=1e-7)


def test_flow_metrics_uniform_offset():
    gt = np.zeros((20, 3))
    gt[:, 0] = 0.1
    pred = gt.copy()
    pred[:, 1] = 0.2  # error 0.2 m on 0.1 m flows
    out = flow_metrics(pred, gt)
    assert out["epe3d"] == pytest.approx(0.2)
    assert out["acc5"] == 0.0
    assert out["acc10"] == 0.0


def test_flow_metrics_relative_threshold():
    gt = np.zeros((10, 3))
    gt[:, 0] = 10.0  # large flows: 0.3 m error is 3% relative
    pred = gt.copy()
    pred[:, 1] = 0.3
    out = flow_metrics(pred, gt)
    assert out["acc5"] == 100.0


def test_flow_metrics_empty_mask():
    assert flow_metrics(np.zeros((5, 3)), np.zeros((5, 3)), np.zeros(5, bool)) is None


def test_dynamic_mask_threshold():
    flow = np.zeros((3, 3, 3))
    flow[1, 1] = [0.1, 0, 0]
    mask = dynamic_mask(flow, 0.01)
    assert mask.sum() == 1 and mask[1, 1]
    assert not dynamic_mask(flow, np.inf).any()


# -- evaluation runner ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def eval_report():
    clips = [make_clip(generate_scene(s, TINY_GEN), n_context=2) for s in (51, 52)]
    model = Model.init(TINY_MODEL, seed=1)
    return evaluate(model, clips)


def test_evaluate_report_structure(eval_report):
    assert eval_report.num_clips == 2
    assert eval_report.aggregate["full"]["psnr"] is not None
    assert len(eval_report.per_clip) == 2


def test_report_schema_validates(eval_report):
    schema = load_schema("eval_report.schema.json")
    body = json.loads(eval_report.to_json())
    assert validate_schema(body, schema) == []


def test_schema_validator_catches_problems():
    schema = load_schema("eval_report.schema.json")
    assert validate_schema({"schema_version": "x"}, schema) != []


def test_report_json_deterministic(eval_report):
    assert eval_report.to_json() == eval_report.to_json()
    assert "runtime" not in eval_report.to_json()


def test_aggregate_is_mean_of_clips(eval_report):
    vals = [c["full"]["psnr"] for c in eval_report.per_clip]
    assert eval_report.aggregate["full"]["psnr"] == pytest.approx(np.mean(vals), abs=1e-9)


def test_zero_shot_context_counts():
    clips = [make_clip(generate_scene(53, TINY_GEN), n_context=2)]
    model = Model.init(TINY_MODEL, seed=1)
    for n in (1, 2, 3):
        rep = evaluate(model, clips, context_count=n)
        assert rep.context_count == n
        assert rep.aggregate["full"]["psnr"] is not None
