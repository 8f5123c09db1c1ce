"""Differentiable 3D Gaussian rasterizer with sky compositing and affine color correction.

Projection follows the standard EWA first-order approximation: the 2D
covariance is J W Sigma W^T J^T plus an anti-aliasing blur floor. Compositing
is front-to-back alpha blending over depth-sorted Gaussians, evaluated as a
flat (pixel, gaussian) pair list with segmented scans, which keeps the whole
kernel vectorized and makes the tiled and brute-force paths produce bit-wise
identical results (both reduce to the same canonically ordered pair array).

Defaults (alpha clamp 0.999, termination T < 1e-4, blur 0.3 px^2, cutoff
radius 3.33 sigma) are documented implementation choices, not reproductions
of any particular backend.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tp
from .geometry import Camera, gaussian_covariance_t
from .tensor import Tensor

ALPHA_CLAMP = 0.999
TERMINATION_T = 1e-4
BLUR_FLOOR = 0.3  # px^2, added to both 2D covariance eigenvalues
CUTOFF_SIGMA = 3.33  # max bounded-support radius; tail alpha < o/255 beyond it
ALPHA_QUANTUM = 1.0 / 510.0  # half of one 8-bit color step
TILE = 16


def _support_radius(lam_max: np.ndarray, opacity: np.ndarray) -> np.ndarray:
    """Bounded-support radius: where alpha falls below half a color quantum.

    r^2 = 2 * ln(o / quantum) * lam_max, capped at CUTOFF_SIGMA * sigma, so
    faint Gaussians get proportionally smaller footprints.
    """
    ratio = np.maximum(opacity, ALPHA_QUANTUM * 1.001) / ALPHA_QUANTUM
    k = np.minimum(np.sqrt(2.0 * np.log(ratio)), CUTOFF_SIGMA)
    return k * np.sqrt(lam_max)


@dataclass
class GaussianSet:
    """Per-timestep 3D Gaussians with paired backward/forward velocities.

    ``velocities`` stacks (v_minus, v_plus) as (N, 6) in m/s; ``source_time``
    is the timestep (seconds) each Gaussian was predicted at. ``provenance``
    carries (view, frame, pixel) indices through aggregation.
    """

    centers: Tensor  # (N, 3) m
    quaternions: Tensor  # (N, 4)
    scales: Tensor  # (N, 3) m
    opacities: Tensor  # (N,) in (0, 1)
    colors: Tensor  # (N, 3) in [-1, 1]
    velocities: Tensor  # (N, 6) m/s
    source_time: np.ndarray  # (N,) s
    provenance: np.ndarray | None = None  # (N, 3) int: view, frame, pixel

    def __post_init__(self):
        n = self.centers.shape[0]
        self.source_time = np.asarray(self.source_time, dtype=np.float64)
        if self.source_time.ndim == 0:
            self.source_time = np.full(n, float(self.source_time))
        shapes = {
            "centers": (n, 3),
            "quaternions": (n, 4),
            "scales": (n, 3),
            "opacities": (n,),
            "colors": (n, 3),
            "velocities": (n, 6),
        }
        for name, want in shapes.items():
            got = getattr(self, name).shape
            if tuple(got) != want:
                raise ValueError(f"GaussianSet.{name} has shape {got}, expected {want}")
        if self.source_time.shape != (n,):
            raise ValueError("source_time must have one entry per Gaussian")

    def __len__(self) -> int:
        return self.centers.shape[0]

    def validate(self) -> None:
        """Check value-range invariants (raises on violation)."""
        o = self.opacities.numpy()
        s = self.scales.numpy()
        if len(self) and not ((o > 0) & (o < 1)).all():
            raise ValueError("opacities must lie in (0, 1)")
        if len(self) and not ((s > 0) & (s <= 0.5)).all():
            raise ValueError("scales must lie in (0, 0.5]")

    def detached(self) -> "GaussianSet":
        return GaussianSet(
            centers=self.centers.detach(),
            quaternions=self.quaternions.detach(),
            scales=self.scales.detach(),
            opacities=self.opacities.detach(),
            colors=self.colors.detach(),
            velocities=self.velocities.detach(),
            source_time=self.source_time.copy(),
            provenance=None if self.provenance is None else self.provenance.copy(),
        )

    @staticmethod
    def empty(dtype=np.float32) -> "GaussianSet":
        z = lambda *shape: Tensor(np.zeros(shape, dtype=dtype))
        return GaussianSet(z(0, 3), z(0, 4), z(0, 3), z(0,), z(0, 3), z(0, 6), np.zeros(0))


@dataclass
class ProjectedGaussians:
    """Per-Gaussian screen-space quantities for the surviving (unculled) set."""

    mean2d: Tensor  # (N, 2) continuous image coords
    cov2d: Tensor  # (N, 3) packed symmetric [a, b, c] for [[a, b], [b, c]]
    depth: Tensor  # (N,) view-space z
    opacities: Tensor  # (N,)
    colors: Tensor  # (N, 3)
    kept: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


@dataclass
class RenderOutput:
    """Raster maps; ``composited`` / ``corrected`` are filled by later stages."""

    color: Tensor  # (H, W, 3) pre-sky
    depth: Tensor  # (H, W) m
    opacity: Tensor  # (H, W) in [0, 1]
    composited: Tensor | None = None  # after sky
    corrected: Tensor | None = None  # after per-camera affine


def project(gaussians: GaussianSet, camera: Camera, near: float = 0.1, blur: float = BLUR_FLOOR) -> ProjectedGaussians:
    """EWA projection of a GaussianSet into a camera; culls depth <= near."""
    n = len(gaussians)
    dtype = gaussians.centers.dtype
    rot_wc, t_wc = camera.world_to_camera
    rot_t = Tensor(rot_wc.T.astype(dtype))
    t_t = Tensor(t_wc.astype(dtype))
    if n == 0:
        e = lambda *shape: Tensor(np.zeros(shape, dtype=dtype))
        return ProjectedGaussians(e(0, 2), e(0, 3), e(0,), e(0,), e(0, 3))

    pc_all = tp.matmul(gaussians.centers, rot_t) + t_t  # (N, 3) camera frame
    keep = np.flatnonzero(pc_all.numpy()[:, 2] > near)
    if keep.size == 0:
        e = lambda *shape: Tensor(np.zeros(shape, dtype=dtype))
        return ProjectedGaussians(e(0, 2), e(0, 3), e(0,), e(0,), e(0, 3), kept=keep)

    pc = tp.take(pc_all, keep, axis=0)
    q = tp.take(gaussians.quaternions, keep, axis=0)
    s = tp.take(gaussians.scales, keep, axis=0)
    o = tp.take(gaussians.opacities, keep, axis=0)
    col = tp.take(gaussians.colors, keep, axis=0)

    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    inv_z = 1.0 / z
    u = camera.fx * (x * inv_z) + camera.cx
    v = camera.fy * (y * inv_z) + camera.cy
    mean2d = tp.stack([u, v], axis=1)

    cov_world = gaussian_covariance_t(q, s)  # (N, 3, 3)
    w_t = Tensor(rot_wc.astype(dtype)).reshape(1, 3, 3)
    cov_cam = tp.matmul(tp.matmul(w_t, cov_world), Tensor(rot_wc.T.astype(dtype)).reshape(1, 3, 3))

    # projection Jacobian rows at the Gaussian center
    zero = o * 0.0
    inv_z2 = inv_z * inv_z
    j00 = camera.fx * inv_z
    j02 = (-camera.fx) * (x * inv_z2)
    j11 = camera.fy * inv_z
    j12 = (-camera.fy) * (y * inv_z2)
    jac = tp.reshape(tp.stack([j00, zero, j02, zero, j11, j12], axis=1), (keep.size, 2, 3))
    cov2d_full = tp.matmul(tp.matmul(jac, cov_cam), tp.transpose(jac, (0, 2, 1)))
    a = cov2d_full[:, 0, 0] + blur
    b = cov2d_full[:, 0, 1]
    c = cov2d_full[:, 1, 1] + blur
    cov2d = tp.stack([a, b, c], axis=1)
    return ProjectedGaussians(mean2d=mean2d, cov2d=cov2d, depth=z, opacities=o, colors=col, kept=keep)


def _pairs_brute(mean: np.ndarray, radius: np.ndarray, h: int, w: int):
    """All (gaussian, pixel) pairs whose pixel lies in the Gaussian's bbox.

    Input arrays are in depth-sorted order; pairs come out gaussian-major so
    the later stable sort by pixel id preserves depth order per pixel.
    """
    x0 = np.clip(np.floor(mean[:, 0] - radius), 0, w).astype(np.int32)
    x1 = np.clip(np.floor(mean[:, 0] + radius) + 1, 0, w).astype(np.int32)
    y0 = np.clip(np.floor(mean[:, 1] - radius), 0, h).astype(np.int32)
    y1 = np.clip(np.floor(mean[:, 1] + radius) + 1, 0, h).astype(np.int32)
    wpx = np.maximum(x1 - x0, 0)
    hpx = np.maximum(y1 - y0, 0)
    cnt = wpx * hpx
    keep = np.flatnonzero(cnt > 0).astype(np.int32)
    cntk = cnt[keep]
    gid = np.repeat(keep, cntk)
    total = int(cntk.sum())
    off = np.cumsum(cntk, dtype=np.int64) - cntk
    loc = (np.arange(total, dtype=np.int64) - np.repeat(off, cntk)).astype(np.int32)
    lw = wpx[gid]
    px = x0[gid] + loc % lw
    py = y0[gid] + loc // lw
    return gid, py * np.int32(w) + px


def _pairs_tiled(mean: np.ndarray, radius: np.ndarray, h: int, w: int, tile: int = TILE):
    """Tile-binned pair generation; yields the same pair set as brute force."""
    n = mean.shape[0]
    tx = (w + tile - 1) // tile
    ty = (h + tile - 1) // tile
    gids, pids = [], []
    x0 = mean[:, 0] - radius
    x1 = mean[:, 0] + radius
    y0 = mean[:, 1] - radius
    y1 = mean[:, 1] + radius
    for tj in range(tx):
        for ti in range(ty):
            lo_x, hi_x = tj * tile, min((tj + 1) * tile, w)
            lo_y, hi_y = ti * tile, min((ti + 1) * tile, h)
            hit = np.flatnonzero((x1 >= lo_x) & (x0 < hi_x) & (y1 >= lo_y) & (y0 < hi_y))
            if hit.size == 0:
                continue
            gx0 = np.clip(np.floor(x0[hit]), lo_x, hi_x).astype(np.int32)
            gx1 = np.clip(np.floor(x1[hit]) + 1, lo_x, hi_x).astype(np.int32)
            gy0 = np.clip(np.floor(y0[hit]), lo_y, hi_y).astype(np.int32)
            gy1 = np.clip(np.floor(y1[hit]) + 1, lo_y, hi_y).astype(np.int32)
            wpx = np.maximum(gx1 - gx0, 0)
            hpx = np.maximum(gy1 - gy0, 0)
            cnt = wpx * hpx
            nz = np.flatnonzero(cnt > 0)
            if nz.size == 0:
                continue
            cntk = cnt[nz]
            gid = np.repeat(hit[nz].astype(np.int32), cntk)
            total = int(cntk.sum())
            off = np.cumsum(cntk, dtype=np.int64) - cntk
            loc = (np.arange(total, dtype=np.int64) - np.repeat(off, cntk)).astype(np.int32)
            lw = wpx[nz][np.repeat(np.arange(nz.size), cntk)]
            px = gx0[nz][np.repeat(np.arange(nz.size), cntk)] + loc % lw
            py = gy0[nz][np.repeat(np.arange(nz.size), cntk)] + loc // lw
            gids.append(gid)
            pids.append(py * np.int32(w) + px)
    if not gids:
        return np.zeros(0, dtype=np.int32), np.zeros(0, dtype=np.int32)
    return np.concatenate(gids), np.concatenate(pids)


def rasterize(
    projected: ProjectedGaussians,
    height: int,
    width: int,
    tiled: bool = False,
) -> RenderOutput:
    """Front-to-back alpha compositing of projected Gaussians.

    Returns color Sum(c a T), opacity Sum(a T), and depth
    Sum(z a T) / max(opacity, 1e-6) with T the running transmittance.
    Gradients w.r.t. all five projected inputs are analytic.
    """
    mean2d, cov2d, depth, opac, colors = (
        projected.mean2d,
        projected.cov2d,
        projected.depth,
        projected.opacities,
        projected.colors,
    )
    dtype = mean2d.dtype
    n = mean2d.shape[0]
    hw = height * width

    if n == 0:
        raw = Tensor(np.zeros((height, width, 5), dtype=dtype))
    else:
        m = mean2d.numpy()
        cv = cov2d.numpy()
        z = depth.numpy()
        o = opac.numpy()
        col = colors.numpy()

        order = np.argsort(z, kind="stable")  # ascending depth, ties by index
        m_s, cv_s, z_s, o_s, col_s = m[order], cv[order], z[order], o[order], col[order]
        a_, b_, c_ = cv_s[:, 0], cv_s[:, 1], cv_s[:, 2]
        det = a_ * c_ - b_ * b_
        ok = det > 0  # unreachable with the blur floor, but guard anyway
        lam = 0.5 * (a_ + c_) + np.sqrt(np.maximum(0.25 * (a_ - c_) ** 2 + b_ * b_, 0.0))
        radius = np.where(ok, _support_radius(lam, o_s), -1.0)

        gen = _pairs_tiled if tiled else _pairs_brute
        gid, pid = gen(m_s, radius, height, width)
        srt = np.argsort(pid, kind="stable")
        gid = gid[srt]
        pid = pid[srt]
        p = gid.size

        if p == 0:
            raw = Tensor(np.zeros((height, width, 5), dtype=dtype))
        else:
            pxc = (pid % width).astype(dtype) + dtype.type(0.5)
            pyc = (pid // width).astype(dtype) + dtype.type(0.5)
            dx = pxc - m_s[gid, 0]
            dy = pyc - m_s[gid, 1]
            ag, bg, cg = a_[gid], b_[gid], c_[gid]
            idet = 1.0 / det[gid]
            qv = (cg * dx * dx - 2.0 * bg * dx * dy + ag * dy * dy) * idet
            gauss = np.exp(-0.5 * qv)
            alpha_raw = o_s[gid] * gauss
            clamped = alpha_raw > ALPHA_CLAMP
            alpha = np.minimum(alpha_raw, ALPHA_CLAMP)

            starts = np.flatnonzero(np.concatenate([[True], pid[1:] != pid[:-1]]))
            seg_len = np.diff(np.concatenate([starts, [p]]))
            l1p = np.log1p(-alpha)
            cum = np.cumsum(l1p)
            log_t = cum - l1p  # exclusive prefix, global
            base = np.repeat(log_t[starts], seg_len)
            t_run = np.exp(log_t - base)
            live = t_run > TERMINATION_T
            weight = np.where(live, alpha * t_run, 0.0)

            acc = np.zeros((hw, 5), dtype=dtype)
            upid = pid[starts]
            acc[upid, 0:3] = np.add.reduceat(weight[:, None] * col_s[gid], starts, axis=0)
            acc[upid, 3] = np.add.reduceat(weight, starts)
            acc[upid, 4] = np.add.reduceat(weight * z_s[gid], starts)
            raw_data = acc.reshape(height, width, 5)

            def vjp(g):
                gflat = g.reshape(hw, 5)
                g_col = gflat[pid, 0:3]
                g_o = gflat[pid, 3]
                g_zacc = gflat[pid, 4]
                # d(loss)/d(weight_i)
                g_w = (g_col * col_s[gid]).sum(axis=1) + g_o + g_zacc * z_s[gid]
                g_w = np.where(live, g_w, 0.0)
                # suffix sums of g_w * weight within each segment
                prod = g_w * weight
                cum_p = np.cumsum(prod)
                inc = cum_p - np.repeat(cum_p[starts] - prod[starts], seg_len)
                totals = np.repeat(np.add.reduceat(prod, starts), seg_len)
                suffix = totals - inc
                g_alpha = g_w * t_run - suffix / (1.0 - alpha)
                g_alpha = np.where(clamped, 0.0, g_alpha)
                # alpha = o * exp(-q/2)
                g_og = g_alpha * gauss
                g_q = g_alpha * o_s[gid] * gauss * (-0.5)
                g_dx = g_q * (2.0 * cg * dx - 2.0 * bg * dy) * idet
                g_dy = g_q * (2.0 * ag * dy - 2.0 * bg * dx) * idet
                # q = (c dx^2 - 2 b dx dy + a dy^2) / det, det = a c - b^2
                g_a = g_q * (dy * dy - qv * cg) * idet
                g_c = g_q * (dx * dx - qv * ag) * idet
                g_b = g_q * 2.0 * (qv * bg - dx * dy) * idet
                g_zs = g_zacc * weight
                nk = m_s.shape[0]

                def acc_g(vals):
                    return np.bincount(gid, weights=vals, minlength=nk).astype(dtype)

                gm = np.stack([-acc_g(g_dx), -acc_g(g_dy)], axis=1)
                gcv = np.stack([acc_g(g_a), acc_g(g_b), acc_g(g_c)], axis=1)
                gz = acc_g(g_zs)
                go = acc_g(g_og)
                gcolor = np.stack([acc_g(weight * g_col[:, k]) for k in range(3)], axis=1)
                inv = np.empty_like(order)
                inv[order] = np.arange(nk)
                return gm[inv], gcv[inv], gz[inv], go[inv], gcolor[inv]

            raw = tp.custom_op("rasterize", raw_data, (mean2d, cov2d, depth, opac, colors), vjp)

    color = raw[:, :, 0:3]
    opacity = raw[:, :, 3]
    depth_map = raw[:, :, 4] / tp.maximum_const(opacity, 1e-6)
    return RenderOutput(color=color, depth=depth_map, opacity=opacity)


def composite_sky(render: RenderOutput, sky_color: Tensor) -> Tensor:
    """Blend per-pixel sky color behind the splats: I' = I_GS + (1 - O) * c_sky."""
    one_minus = 1.0 - render.opacity
    h, w = one_minus.shape
    out = render.color + tp.reshape(one_minus, (h, w, 1)) * sky_color
    render.composited = out
    return out


def apply_affine(image: Tensor, scale: Tensor, bias: Tensor) -> Tensor:
    """Per-pixel linear color map: out = S @ rgb + b (S is 3x3, b is 3)."""
    h, w, _ = image.shape
    flat = tp.reshape(image, (h * w, 3))
    out = tp.matmul(flat, tp.transpose(scale, (1, 0))) + bias
    return tp.reshape(out, (h, w, 3))


# -- PLY export ---------------------------------------------------------------------

_PLY_FIELDS = [
    "x", "y", "z",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
    "opacity",
    "red", "green", "blue",
    "vx_minus", "vy_minus", "vz_minus",
    "vx_plus", "vy_plus", "vz_plus",
]


def write_ply(path, gaussians: GaussianSet) -> None:
    """Binary little-endian PLY with velocity extension properties."""
    n = len(gaussians)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in _PLY_FIELDS]
    header.append("end_header")
    data = np.concatenate(
        [
            gaussians.centers.numpy().reshape(n, 3),
            gaussians.scales.numpy().reshape(n, 3),
            gaussians.quaternions.numpy().reshape(n, 4),
            gaussians.opacities.numpy().reshape(n, 1),
            gaussians.colors.numpy().reshape(n, 3),
            gaussians.velocities.numpy().reshape(n, 6),
        ],
        axis=1,
    ).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())


def read_ply(path) -> dict[str, np.ndarray]:
    """Read back a PLY written by :func:`write_ply` (column name -> array)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    end = blob.index(b"end_header\n") + len(b"end_header\n")
    lines = blob[:end].decode("ascii").splitlines()
    if lines[1] != "format binary_little_endian 1.0":
        raise ValueError("unsupported PLY format")
    n = int(next(ln.split()[-1] for ln in lines if ln.startswith("element vertex")))
    names = [ln.split()[-1] for ln in lines if ln.startswith("property")]
    rows = np.frombuffer(blob[end:], dtype="<f4").reshape(n, len(names))
    return {name: rows[:, k].copy() for k, name in enumerate(names)}
