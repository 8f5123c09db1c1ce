"""Velocity-driven transport of Gaussians across time and everything built on it:
amodal aggregation, scene-flow extraction, trajectory chaining, motion
segmentation, and multi-clip merging.

The motion model is constant velocity within a clip, with separate backward
and forward velocities: moving a Gaussian from its source time t to t' uses
mu - (t' - t) v_minus when t' < t and mu + (t' - t) v_plus when t' > t. Note
the backward branch's sign: v_minus points along the motion history, so a
smoothly moving point has v_minus ~= -v_plus.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tensor as tp
from .splatter import GaussianSet
from .synthgen import write_tensors
from .tensor import Tensor


@dataclass
class FlowField:
    """Per-Gaussian 3D displacement (meters) over a time interval."""

    vectors: np.ndarray  # (N, 3)
    valid: np.ndarray  # (N,) bool

    def __post_init__(self):
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.vectors.shape[0] != self.valid.shape[0]:
            raise ValueError("vectors and valid mask disagree in length")


@dataclass
class Trajectory:
    track_id: int
    times: np.ndarray  # (K,) strictly increasing
    positions: np.ndarray  # (K, 3)

    def __post_init__(self):
        if len(self.times) != len(self.positions):
            raise ValueError("times and positions disagree in length")
        if len(self.times) > 1 and not (np.diff(self.times) > 0).all():
            raise ValueError("trajectory times must be strictly increasing")


def transform_to(g: GaussianSet, t_prime: float) -> GaussianSet:
    """Move Gaussian centers to time ``t_prime`` under the two-sided constant-velocity rule.

    Rotation, scale, opacity, and color are unchanged; only centers translate.
    """
    dtype = g.centers.dtype
    dt_minus = np.maximum(g.source_time - t_prime, 0.0).astype(dtype)[:, None]
    dt_plus = np.maximum(t_prime - g.source_time, 0.0).astype(dtype)[:, None]
    v_minus = g.velocities[:, 0:3]
    v_plus = g.velocities[:, 3:6]
    centers = g.centers + Tensor(dt_minus) * v_minus + Tensor(dt_plus) * v_plus
    return GaussianSet(
        centers=centers,
        quaternions=g.quaternions,
        scales=g.scales,
        opacities=g.opacities,
        colors=g.colors,
        velocities=g.velocities,
        source_time=np.full(len(g), t_prime),
        provenance=g.provenance,
    )


def aggregate(clouds: list[GaussianSet], t_prime: float) -> GaussianSet:
    """Union of per-frame sets, each transported to ``t_prime`` (amodal aggregation)."""
    moved = [transform_to(g, t_prime) for g in clouds]
    if len(moved) == 1:
        return moved[0]
    prov = None
    if all(g.provenance is not None for g in moved):
        prov = np.concatenate([g.provenance for g in moved], axis=0)
    return GaussianSet(
        centers=tp.concat([g.centers for g in moved], axis=0),
        quaternions=tp.concat([g.quaternions for g in moved], axis=0),
        scales=tp.concat([g.scales for g in moved], axis=0),
        opacities=tp.concat([g.opacities for g in moved], axis=0),
        colors=tp.concat([g.colors for g in moved], axis=0),
        velocities=tp.concat([g.velocities for g in moved], axis=0),
        source_time=np.concatenate([g.source_time for g in moved]),
        provenance=prov,
    )


def scene_flow(g: GaussianSet, t_a: float, t_b: float) -> FlowField:
    """Displacement of every Gaussian over [t_a, t_b], in meters."""
    if t_a == t_b:
        raise ValueError("scene_flow needs two distinct times")
    with tp.no_grad():
        pa = transform_to(g, t_a).centers.numpy()
        pb = transform_to(g, t_b).centers.numpy()
    vec = pb - pa
    return FlowField(vectors=vec, valid=np.isfinite(vec).all(axis=1))


def dynamic_gaussian_mask(g: GaussianSet, span: float, threshold: float = 0.05) -> np.ndarray:
    """Gaussians whose velocity would move them more than ``threshold`` over ``span``."""
    v = g.velocities.numpy()
    mag = np.maximum(np.linalg.norm(v[:, 0:3], axis=1), np.linalg.norm(v[:, 3:6], axis=1))
    return mag * span > threshold


def chain_trajectories(
    clouds: list[GaussianSet],
    times: list[float],
    radius: float | None = None,
    dynamic_mask: list[np.ndarray] | None = None,
    threshold: float = 0.05,
) -> list[Trajectory]:
    """Link per-frame Gaussians into trajectories by advect-then-nearest-neighbor.

    Each frame's dynamic Gaussians are moved to the next frame time with their
    forward velocity; a Gaussian at the next frame joins the trajectory of its
    nearest advected predecessor within ``radius`` (greedy one-to-one, closest
    pairs first). A missing neighbor simply terminates the trajectory.
    """
    if len(clouds) != len(times):
        raise ValueError("one timestamp per cloud required")
    n_frames = len(clouds)
    if n_frames == 0:
        return []
    span = float(times[-1] - times[0]) if n_frames > 1 else 1.0
    if dynamic_mask is None:
        dynamic_mask = [dynamic_gaussian_mask(g, span, threshold) for g in clouds]
    idx = [np.flatnonzero(m) for m in dynamic_mask]
    pos = [g.centers.numpy() for g in clouds]

    if radius is None:
        mags = []
        for f in range(n_frames - 1):
            dt = times[f + 1] - times[f]
            sel = idx[f]
            if sel.size:
                mags.append(np.linalg.norm(clouds[f].velocities.numpy()[sel, 3:6] * dt, axis=1))
        mean_disp = float(np.concatenate(mags).mean()) if mags else 0.0
        radius = max(0.5 * mean_disp, 1e-6)

    # pred_link[f][k] = index (into idx[f]) of the predecessor of idx[f+1][k]
    succ: list[dict[int, int]] = [dict() for _ in range(n_frames - 1)]
    for f in range(n_frames - 1):
        a, b = idx[f], idx[f + 1]
        if a.size == 0 or b.size == 0:
            continue
        dt = times[f + 1] - times[f]
        advected = pos[f][a] + clouds[f].velocities.numpy()[a, 3:6] * dt
        targets = pos[f + 1][b]
        d2 = ((targets[:, None, :] - advected[None, :, :]) ** 2).sum(-1)
        order = np.argsort(d2, axis=None, kind="stable")
        used_a, used_b = set(), set()
        r2 = radius * radius
        for flat in order:
            bi, ai = divmod(int(flat), a.size)
            if d2[bi, ai] > r2:
                break
            if ai in used_a or bi in used_b:
                continue
            used_a.add(ai)
            used_b.add(bi)
            succ[f][int(a[ai])] = int(b[bi])

    # walk chains from their earliest frame
    has_pred = [set() for _ in range(n_frames)]
    for f in range(n_frames - 1):
        for j in succ[f].values():
            has_pred[f + 1].add(j)
    trajectories = []
    for f0 in range(n_frames):
        for i in idx[f0]:
            if int(i) in has_pred[f0]:
                continue
            ts, ps = [times[f0]], [pos[f0][i]]
            f, cur = f0, int(i)
            while f < n_frames - 1 and cur in succ[f]:
                cur = succ[f][cur]
                f += 1
                ts.append(times[f])
                ps.append(pos[f][cur])
            trajectories.append(Trajectory(len(trajectories), np.array(ts), np.stack(ps)))
    return trajectories


def motion_segmentation(weights: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over the motion-basis weights; ties take the lowest index."""
    weights = np.asarray(weights)
    if weights.size and weights.shape[-1] == 0:
        return np.zeros(weights.shape[:-1], dtype=np.int64)
    return np.argmax(weights, axis=-1).astype(np.int64)


def _quat_multiply(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    w1, x1, y1, z1 = q1
    w2, x2, y2, z2 = np.moveaxis(q2, -1, 0)
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def _rotation_to_quat(r: np.ndarray) -> np.ndarray:
    t = np.trace(r)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        return np.array([0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s])
    i = int(np.argmax(np.diag(r)))
    j, k = (i + 1) % 3, (i + 2) % 3
    s = np.sqrt(max(r[i, i] - r[j, j] - r[k, k] + 1.0, 0.0)) * 2
    q = np.empty(4)
    q[0] = (r[k, j] - r[j, k]) / s
    q[1 + i] = 0.25 * s
    q[1 + j] = (r[j, i] + r[i, j]) / s
    q[1 + k] = (r[k, i] + r[i, k]) / s
    return q


def merge_clips(clips: list[tuple[GaussianSet, np.ndarray | None]]) -> GaussianSet:
    """Concatenate per-clip Gaussians into the first clip's world frame.

    Each entry is (gaussians, world_from_scene). Overlapping regions are not
    deduplicated. A missing transform with more than one clip is an error.
    """
    if not clips:
        return GaussianSet.empty()
    if len(clips) == 1:
        return clips[0][0]
    if any(pose is None for _, pose in clips):
        raise ValueError("merge_clips: missing world_from_scene pose chain")
    r0, t0 = clips[0][1][:, :3], clips[0][1][:, 3]
    parts = []
    for g, pose in clips:
        rk, tk = pose[:, :3], pose[:, 3]
        rot = r0 @ rk.T  # world_k -> world_0
        shift = t0 - rot @ tk
        centers = g.centers.numpy() @ rot.T + shift
        qrot = _rotation_to_quat(rot)
        quats = _quat_multiply(qrot, g.quaternions.numpy())
        vel = g.velocities.numpy()
        vel = np.concatenate([vel[:, 0:3] @ rot.T, vel[:, 3:6] @ rot.T], axis=1)
        parts.append(
            GaussianSet(
                centers=Tensor(centers.astype(g.centers.dtype)),
                quaternions=Tensor(quats.astype(g.centers.dtype)),
                scales=g.scales,
                opacities=g.opacities,
                colors=g.colors,
                velocities=Tensor(vel.astype(g.centers.dtype)),
                source_time=g.source_time,
                provenance=g.provenance,
            )
        )
    return GaussianSet(
        centers=tp.concat([g.centers for g in parts], axis=0),
        quaternions=tp.concat([g.quaternions for g in parts], axis=0),
        scales=tp.concat([g.scales for g in parts], axis=0),
        opacities=tp.concat([g.opacities for g in parts], axis=0),
        colors=tp.concat([g.colors for g in parts], axis=0),
        velocities=tp.concat([g.velocities for g in parts], axis=0),
        source_time=np.concatenate([g.source_time for g in parts]),
        provenance=None,
    )


# -- exports ------------------------------------------------------------------------


def write_trajectories(path, trajectories: list[Trajectory]) -> None:
    """Line-delimited records: track_id time x y z."""
    with open(path, "w") as fh:
        for tr in trajectories:
            for t, p in zip(tr.times, tr.positions):
                fh.write(f"{tr.track_id} {t:.9g} {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")


def write_flow(path_prefix, flow: FlowField, meta: dict | None = None) -> None:
    """Binary flow tensor plus a JSON manifest next to it."""
    write_tensors(f"{path_prefix}.bin", {"vectors": flow.vectors.astype(np.float32), "valid": flow.valid.astype(np.uint8)})
    manifest = {"count": int(flow.vectors.shape[0]), "format": "vectors:f32 (N,3); valid:u8 (N,)"}
    manifest.update(meta or {})
    with open(f"{path_prefix}.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
