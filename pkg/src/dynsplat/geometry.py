"""Cameras, rays, Plucker coordinates, and quaternion/covariance math.

Conventions (fixed so model, rasterizer, and oracle agree):
  * camera frame: x right, y down, z forward; pose is world-from-camera.
  * pixel (i, j) — row i, column j — samples the continuous image point
    (j + 0.5, i + 0.5); a world point projects to u = fx*x/z + cx,
    v = fy*y/z + cy.
  * quaternions are (w, x, y, z) and are normalized before use.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tp
from .tensor import Tensor

ORTHONORMAL_TOL = 1e-6


@dataclass
class Camera:
    """Pinhole camera with a world-from-camera rigid pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # (3, 3) world-from-camera
    translation: np.ndarray  # (3,) meters
    camera_index: int = 0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > ORTHONORMAL_TOL:
            raise ValueError(f"rotation is not orthonormal (max deviation {err:.2e})")
        if self.camera_index < 0:
            raise ValueError("camera_index must be non-negative")

    @property
    def world_to_camera(self) -> tuple[np.ndarray, np.ndarray]:
        r = self.rotation.T
        return r, -r @ self.translation

    def project(self, points_world: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project world points to continuous image coords; returns (uv, view z)."""
        r, t = self.world_to_camera
        pc = points_world @ r.T + t
        z = pc[..., 2]
        u = self.fx * pc[..., 0] / z + self.cx
        v = self.fy * pc[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1), z

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "camera_index": self.camera_index,
        }

    @staticmethod
    def from_dict(d: dict) -> "Camera":
        return Camera(
            fx=d["fx"],
            fy=d["fy"],
            cx=d["cx"],
            cy=d["cy"],
            width=d["width"],
            height=d["height"],
            rotation=np.array(d["rotation"], dtype=np.float64),
            translation=np.array(d["translation"], dtype=np.float64),
            camera_index=d["camera_index"],
        )


@dataclass
class RayMap:
    """Per-pixel ray origins/directions plus Plucker line coordinates."""

    origins: np.ndarray  # (H, W, 3)
    directions: np.ndarray  # (H, W, 3), unit length
    plucker: np.ndarray = field(init=False)  # (H, W, 6): direction, origin x direction

    def __post_init__(self):
        self.plucker = np.concatenate(
            [self.directions, np.cross(self.origins, self.directions)], axis=-1
        )


def make_rays(camera: Camera) -> RayMap:
    """Rays through every pixel center, expressed in the world frame."""
    h, w = camera.height, camera.width
    j = np.arange(w, dtype=np.float64) + 0.5
    i = np.arange(h, dtype=np.float64) + 0.5
    x = (j[None, :] - camera.cx) / camera.fx
    y = (i[:, None] - camera.cy) / camera.fy
    dirs_cam = np.stack([np.broadcast_to(x, (h, w)), np.broadcast_to(y, (h, w)), np.ones((h, w))], axis=-1)
    dirs_world = dirs_cam @ camera.rotation.T
    dirs_world /= np.linalg.norm(dirs_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.translation, (h, w, 3)).copy()
    return RayMap(origins=origins, directions=dirs_world)


def frequency_embed(x: np.ndarray, num_freqs: int) -> np.ndarray:
    """NeRF-style positional encoding.

    Per input coordinate, emits [sin(2^k pi x), cos(2^k pi x)] for
    k = 0..F-1, so the output has 2*F*dim(x) channels (trailing axis).
    """
    if num_freqs < 1:
        raise ValueError("num_freqs must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        x = x[None]
    freqs = (2.0 ** np.arange(num_freqs)) * np.pi
    ang = x[..., None] * freqs  # (..., dim, F)
    enc = np.stack([np.sin(ang), np.cos(ang)], axis=-1)  # (..., dim, F, 2)
    return enc.reshape(*x.shape[:-1], x.shape[-1] * 2 * num_freqs)


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    """Unit-quaternion (w, x, y, z) to rotation matrix; vectorized over leading dims."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if (norm < 1e-8).any():
        raise ValueError("quaternion norm too small to normalize")
    w, x, y, z = np.moveaxis(q / norm, -1, 0)
    row0 = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1)
    row1 = np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1)
    row2 = np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


def gaussian_covariance(q: np.ndarray, s: np.ndarray) -> np.ndarray:
    """World-space covariance R diag(s^2) R^T of an anisotropic Gaussian."""
    r = quat_to_rotation(q)
    s = np.asarray(s, dtype=np.float64)
    return (r * (s**2)[..., None, :]) @ np.swapaxes(r, -1, -2)


# -- tape-side versions (vectorized over N, differentiable) -----------------------


def quat_to_rotation_t(q: Tensor) -> Tensor:
    """Differentiable quaternion (N, 4) -> rotation (N, 3, 3); normalizes internally."""
    n = q.shape[0]
    norm = tp.sqrt(tp.reduce_sum(q * q, axis=-1, keepdims=True) + 1e-12)
    qn = q / norm
    w, x, y, z = (qn[:, k] for k in range(4))
    two = 2.0
    entries = [
        1 - two * (y * y + z * z), two * (x * y - w * z), two * (x * z + w * y),
        two * (x * y + w * z), 1 - two * (x * x + z * z), two * (y * z - w * x),
        two * (x * z - w * y), two * (y * z + w * x), 1 - two * (x * x + y * y),
    ]
    flat = tp.stack(entries, axis=1)  # (N, 9)
    return tp.reshape(flat, (n, 3, 3))


def gaussian_covariance_t(q: Tensor, s: Tensor) -> Tensor:
    """Differentiable covariance from quaternions (N, 4) and scales (N, 3)."""
    r = quat_to_rotation_t(q)
    s2 = tp.reshape(s * s, (s.shape[0], 1, 3))
    return tp.matmul(r * s2, tp.transpose(r, (0, 2, 1)))
