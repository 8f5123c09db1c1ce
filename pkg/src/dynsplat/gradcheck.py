"""Gradient verification suite: every differentiable primitive plus the full
rendering pipeline on a two-Gaussian 8x8 micro-scene, checked against central
finite differences at 64-bit precision.

Test points are seeded and chosen away from the documented kinks
(min/max-with-constant boundaries, the alpha clamp, termination thresholds),
which the per-op tolerances assume.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tp
from .geometry import Camera, gaussian_covariance_t
from .losses import LossWeights, recon_loss, sky_loss, total_loss, velocity_reg
from .splatter import GaussianSet, apply_affine, composite_sky, project, rasterize
from .dynamics import transform_to
from .tensor import Tensor, finite_difference_check

PRIMITIVE_TOL = 1e-4
PIPELINE_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def _t(rng, shape, lo=-2.0, hi=2.0):
    return Tensor(rng.uniform(lo, hi, shape), dtype=np.float64)


def _primitive_checks(rng) -> list[CheckResult]:
    checks = []

    def add(name, fn, leaves, h=1e-6, tol=PRIMITIVE_TOL):
        checks.append(CheckResult(name, float(finite_difference_check(fn, leaves, h=h)), tol))

    unary = {
        "exp": (tp.exp, (-1.5, 1.5)),
        "log": (tp.log, (0.2, 3.0)),
        "sqrt": (tp.sqrt, (0.2, 3.0)),
        "sigmoid": (tp.sigmoid, (-4, 4)),
        "tanh": (tp.tanh, (-4, 4)),
        "gelu": (tp.gelu, (-4, 4)),
        "sin": (tp.sin, (-3, 3)),
        "cos": (tp.cos, (-3, 3)),
        "abs": (tp.absolute, (0.3, 3.0)),
        "neg": (tp.neg, (-2, 2)),
        "pow2.5": (lambda x: tp.power(x, 2.5), (0.3, 2.0)),
        "min_const": (lambda x: tp.minimum_const(x, 0.9), (0.2, 0.7)),
        "max_const": (lambda x: tp.maximum_const(x, 0.1), (0.3, 0.9)),
    }
    for name, (fn, (lo, hi)) in unary.items():
        x = _t(rng, (12,), lo, hi)
        add(name, lambda v, fn=fn: (fn(v) * fn(v)).sum(), [x])

    for name in ("add", "sub", "mul", "div"):
        a = _t(rng, (3, 4), 0.5, 2.0)
        b = _t(rng, (4,), 0.5, 2.0)
        add(name, lambda x, y, name=name: (tp.elementwise(name, x, y) ** 2).sum(), [a, b])

    a = _t(rng, (4, 5))
    b = _t(rng, (5, 3))
    add("matmul", lambda x, y: (tp.matmul(x, y) ** 2).sum(), [a, b])
    a = _t(rng, (2, 3, 4))
    b = _t(rng, (2, 4, 2))
    add("matmul_batched", lambda x, y: (tp.matmul(x, y) ** 2).sum(), [a, b])

    x = _t(rng, (6,))
    add("softmax", lambda v: (tp.softmax(v, temperature=0.5) ** 2).sum(), [x])
    x = _t(rng, (3, 5))
    w = _t(rng, (5,))
    bshift = _t(rng, (5,))
    add("layer_norm", lambda a_, w_, b_: (tp.layer_norm(a_, w_, b_) ** 2).sum(), [x, w, bshift])
    q, k, v = (_t(rng, (3, 4)) for _ in range(3))
    add("attention", lambda a_, b_, c_: (tp.attention(a_, b_, c_, heads=2) ** 2).sum(), [q, k, v])
    xim = _t(rng, (2, 2, 2))
    kern = _t(rng, (2, 2, 2, 3))
    bias = _t(rng, (3,))
    add("transposed_conv_2x", lambda a_, b_, c_: (tp.transposed_conv_2x(a_, b_, c_) ** 2).sum(), [xim, kern, bias])
    x = _t(rng, (3, 4))
    add("reductions", lambda v: (v.sum(axis=0) * v.mean(axis=0)).sum(), [x])
    x = _t(rng, (4, 4))
    add("shape_ops", lambda v: (tp.transpose(tp.reshape(v, (2, 8)), (1, 0))[1:5, :] ** 2).sum(), [x])
    x = _t(rng, (5, 3))
    add("gather", lambda v: (tp.take(v, np.array([0, 0, 3, 4]), axis=0) ** 2).sum(), [x])
    q = _t(rng, (3, 4))
    s = _t(rng, (3, 3), 0.3, 1.2)
    wmat = Tensor(rng.standard_normal((3, 3, 3)), dtype=np.float64)
    add("covariance", lambda q_, s_: (gaussian_covariance_t(q_, s_) * wmat).sum(), [q, s])
    return checks


def _micro_camera() -> Camera:
    return Camera(fx=8.0, fy=8.0, cx=4.0, cy=4.0, width=8, height=8, rotation=np.eye(3), translation=np.zeros(3))


def micro_scene_leaves() -> list[Tensor]:
    """Two Gaussians plus sky/affine parameters, away from clamp/kink points."""
    return [
        Tensor(np.array([[0.12, -0.08, 2.0], [-0.18, 0.1, 3.2]]), dtype=np.float64),  # centers
        Tensor(np.array([[1.0, 0.1, -0.2, 0.05], [0.9, -0.3, 0.2, 0.1]]), dtype=np.float64),  # quats
        Tensor(np.array([[0.2, 0.28, 0.25], [0.3, 0.22, 0.34]]), dtype=np.float64),  # scales
        Tensor(np.array([0.55, 0.62]), dtype=np.float64),  # opacities
        Tensor(np.array([[0.4, -0.3, 0.2], [-0.5, 0.1, 0.6]]), dtype=np.float64),  # colors
        Tensor(np.array([[0.2, -0.1, 0.05, 0.3, 0.2, -0.15],
                         [-0.25, 0.15, 0.1, -0.2, 0.1, 0.2]]), dtype=np.float64),  # velocities
        Tensor(np.array([0.25, 0.45, -0.15]), dtype=np.float64),  # sky color
        Tensor(np.eye(3) + 0.04, dtype=np.float64),  # affine scale
        Tensor(np.array([0.02, -0.01, 0.03]), dtype=np.float64),  # affine bias
    ]


def micro_pipeline_loss(centers, quats, scales, opac, colors, vel, sky, aff_s, aff_b) -> Tensor:
    """Eq.1 transform -> project -> rasterize -> sky composite -> affine -> losses."""
    cam = _micro_camera()
    gauss = GaussianSet(
        centers=centers, quaternions=quats, scales=scales, opacities=opac, colors=colors,
        velocities=vel, source_time=np.zeros(2),
    )
    moved = transform_to(gauss, 0.4)
    render = rasterize(project(moved, cam), 8, 8)
    sky_img = tp.reshape(sky, (1, 1, 3)) * Tensor(np.ones((8, 8, 3)), dtype=np.float64)
    corrected = apply_affine(composite_sky(render, sky_img), aff_s, aff_b)
    gt_rgb = np.linspace(-0.5, 0.5, 8 * 8 * 3).reshape(8, 8, 3)
    gt_depth = np.full((8, 8), 2.5)
    valid = np.ones((8, 8), bool)
    parts = {
        "recon": recon_loss(corrected, gt_rgb, render.depth, gt_depth, valid),
        "sky": sky_loss(render.opacity, np.zeros((8, 8), dtype=np.uint8)),
        "reg": velocity_reg(vel),
    }
    return total_loss(parts, LossWeights())


def run_gradcheck(fast: bool = False) -> list[CheckResult]:
    rng = np.random.default_rng(20240817)
    results = _primitive_checks(rng)

    if not fast:
        err = finite_difference_check(micro_pipeline_loss, micro_scene_leaves(), h=1e-5)
        results.append(CheckResult("full_pipeline_micro_scene", float(err), PIPELINE_TOL))

        cam = Camera(fx=14.0, fy=14.0, cx=8.0, cy=6.0, width=16, height=12,
                     rotation=np.eye(3), translation=np.zeros(3))
        wimg = Tensor(rng.standard_normal((12, 16, 5)), dtype=np.float64)

        def raster_loss(centers, scales, opac, colors):
            g = GaussianSet(
                centers=centers,
                quaternions=Tensor(np.tile([1.0, 0, 0, 0], (3, 1)), dtype=np.float64),
                scales=scales, opacities=opac, colors=colors,
                velocities=Tensor(np.zeros((3, 6)), dtype=np.float64), source_time=np.zeros(3),
            )
            out = rasterize(project(g, cam), 12, 16)
            stacked = tp.concat(
                [out.color, tp.reshape(out.opacity, (12, 16, 1)), tp.reshape(out.depth, (12, 16, 1))], axis=2
            )
            return (stacked * wimg).sum()

        leaves = [
            Tensor(np.array([[0.1, 0.0, 2.0], [-0.1, 0.05, 2.5], [0.0, -0.1, 4.0]]), dtype=np.float64),
            Tensor(np.full((3, 3), 0.25), dtype=np.float64),
            Tensor(np.array([0.5, 0.6, 0.7]), dtype=np.float64),
            Tensor(rng.uniform(-0.8, 0.8, (3, 3)), dtype=np.float64),
        ]
        err = finite_difference_check(raster_loss, leaves, h=1e-5)
        results.append(CheckResult("rasterizer_kernel", float(err), PIPELINE_TOL))
    return results
