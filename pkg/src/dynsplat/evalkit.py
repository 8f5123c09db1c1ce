"""Quantitative evaluation: PSNR, SSIM, depth RMSE, scene-flow metrics, and a
model-on-clips runner producing a deterministic report.

Conventions: PSNR uses colors mapped back to [0, 1] and caps identical images
at 99 dB. "Full image" metrics are computed over non-sky pixels, dynamic-only
metrics over the thresholded ground-truth flow mask. SSIM is single-scale on
luminance with an 11x11 Gaussian window (sigma 1.5); masked variants average
the SSIM map over the mask. Flow accuracy follows the absolute-or-relative
threshold convention (0.05 m / 5%, 0.1 m / 10%), and angular error lifts
flows homogeneously with a unit w component. Wall-clock timings are reported
separately from the deterministic report body.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as tp
from .dynamics import scene_flow
from .synthgen import ClipRecord, camera_at, context_times_for, render_oracle

PSNR_CAP = 99.0
SCHEMA_VERSION = 1


def psnr(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> float | None:
    """Peak signal-to-noise ratio in dB over masked pixels; images in [0, 1]."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            return None
        pred, gt = pred[mask], gt[mask]
    mse = float(((pred - gt) ** 2).mean())
    if mse <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return float(min(10.0 * np.log10(1.0 / mse), PSNR_CAP))


_LUMA = np.array([0.299, 0.587, 0.114])


def _gauss_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter2d(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    pad = len(k) // 2
    mode = "reflect" if min(img.shape) > pad else "symmetric"
    padded = np.pad(img, pad, mode=mode)
    out = np.zeros_like(img, dtype=np.float64)
    for i, w in enumerate(k):  # separable pass over rows
        out += w * padded[i : i + img.shape[0], pad : pad + img.shape[1]]
    out2 = np.zeros_like(out)
    padded = np.pad(out, ((0, 0), (pad, pad)), mode=mode)
    for i, w in enumerate(k):
        out2 += w * padded[:, i : i + img.shape[1]]
    return out2


def ssim(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> float | None:
    """Single-scale SSIM on luminance; optionally averaged over a pixel mask."""
    p = np.asarray(pred, dtype=np.float64) @ _LUMA
    g = np.asarray(gt, dtype=np.float64) @ _LUMA
    k = _gauss_kernel()
    c1, c2 = 0.01**2, 0.03**2
    mu_p, mu_g = _filter2d(p, k), _filter2d(g, k)
    var_p = _filter2d(p * p, k) - mu_p**2
    var_g = _filter2d(g * g, k) - mu_g**2
    cov = _filter2d(p * g, k) - mu_p * mu_g
    smap = ((2 * mu_p * mu_g + c1) * (2 * cov + c2)) / ((mu_p**2 + mu_g**2 + c1) * (var_p + var_g + c2))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            return None
        return float(smap[mask].mean())
    return float(smap.mean())


def depth_rmse(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> float | None:
    """Root-mean-square depth error (meters) over masked pixels."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return None
    diff = np.asarray(pred, dtype=np.float64)[mask] - np.asarray(gt, dtype=np.float64)[mask]
    return float(np.sqrt((diff**2).mean()))


def flow_metrics(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> dict | None:
    """EPE3D (m), Acc5 (%), Acc10 (%), and homogeneous angular error (rad)."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if mask is not None:
        sel = np.asarray(mask, dtype=bool).reshape(-1)
        if not sel.any():
            return None
        pred, gt = pred[sel], gt[sel]
    epe = np.linalg.norm(pred - gt, axis=1)
    gmag = np.linalg.norm(gt, axis=1)
    rel = epe / np.maximum(gmag, 1e-12)
    acc5 = float(((epe < 0.05) | (rel < 0.05)).mean() * 100.0)
    acc10 = float(((epe < 0.1) | (rel < 0.1)).mean() * 100.0)
    dot = (pred * gt).sum(1) + 1.0
    denom = np.sqrt((pred**2).sum(1) + 1.0) * np.sqrt((gt**2).sum(1) + 1.0)
    theta = float(np.arccos(np.clip(dot / denom, -1.0, 1.0)).mean())
    return {"epe3d": float(epe.mean()), "acc5": acc5, "acc10": acc10, "angular": theta}


def dynamic_mask(gt_flow: np.ndarray, threshold: float = 0.01) -> np.ndarray:
    """Pixels whose ground-truth flow over one frame interval exceeds ``threshold``."""
    return np.linalg.norm(np.asarray(gt_flow, dtype=np.float64), axis=-1) > threshold


# -- report -------------------------------------------------------------------------


@dataclass
class EvalReport:
    per_clip: list[dict]
    aggregate: dict
    context_count: int
    num_clips: int
    flow_threshold: float
    runtime_per_clip_s: float = 0.0  # wall clock; excluded from the report body

    def to_json(self) -> str:
        """Deterministic report body (timings intentionally excluded)."""
        body = {
            "schema_version": SCHEMA_VERSION,
            "num_clips": self.num_clips,
            "context_count": self.context_count,
            "flow_threshold": self.flow_threshold,
            "per_clip": self.per_clip,
            "aggregate": self.aggregate,
        }
        return json.dumps(body, sort_keys=True, indent=1)


def _round(x):
    return None if x is None else round(float(x), 10)


def _mean_of(values):
    vals = [v for v in values if v is not None]
    return _round(float(np.mean(vals))) if vals else None


def _image_metrics(pred01, fb, flow_threshold):
    nonsky = fb.sky_mask == 0
    gt01 = fb.image.astype(np.float64)
    dyn = dynamic_mask(fb.flow, flow_threshold) & nonsky
    return {
        "full": {
            "psnr": _round(psnr(pred01, gt01, nonsky)),
            "ssim": _round(ssim(pred01, gt01)),
            "depth_rmse": None,  # filled by the caller (needs the depth map)
        },
        "dynamic": {
            "psnr": _round(psnr(pred01, gt01, dyn)),
            "ssim": _round(ssim(pred01, gt01, dyn)),
            "depth_rmse": None,
        },
    }


def evaluate(model, clips: list[ClipRecord], context_count: int | None = None,
             flow_threshold: float = 0.01) -> EvalReport:
    """Render every target frame of every clip and score against ground truth.

    ``context_count`` activates zero-shot timestep transfer: contexts are
    re-rendered from the stored scene spec at n evenly spaced times instead of
    the stored 4.
    """
    per_clip = []
    total_time = 0.0
    for ci, clip in enumerate(clips):
        spec = clip.spec
        contexts = clip.context
        if context_count is not None and context_count != len(clip.context[0]):
            times = context_times_for(spec, clip.start_time, context_count)
            contexts = [
                [render_oracle(spec, camera_at(spec, v, t, clip.world_from_scene), t, clip.world_from_scene)
                 for t in times]
                for v in range(spec.num_cameras)
            ]
        t0 = time.perf_counter()
        with tp.no_grad():
            pred = model.reconstruct(contexts, clip.start_time, spec.clip_length)
        total_time += time.perf_counter() - t0

        buckets = {"full": [], "dynamic": [], "interpolation": [], "extrapolation": []}
        interp_limit = clip.start_time + 0.75 * spec.clip_length
        for v in range(spec.num_cameras):
            for fb in clip.targets[v]:
                with tp.no_grad():
                    out = model.render_at(pred, fb.camera, fb.time)
                pred01 = np.clip((out.corrected.numpy().astype(np.float64) + 1.0) / 2.0, 0.0, 1.0)
                nonsky = fb.sky_mask == 0
                dyn = dynamic_mask(fb.flow, flow_threshold) & nonsky
                m = _image_metrics(pred01, fb, flow_threshold)
                m["full"]["depth_rmse"] = _round(depth_rmse(out.depth.numpy(), fb.depth, nonsky))
                m["dynamic"]["depth_rmse"] = _round(depth_rmse(out.depth.numpy(), fb.depth, dyn))
                buckets["full"].append(m["full"])
                buckets["dynamic"].append(m["dynamic"])
                split = "interpolation" if fb.time <= interp_limit + 1e-9 else "extrapolation"
                buckets[split].append(m["full"])

        # scene flow on context frames over one frame interval
        flow_rows = []
        dt = spec.frame_interval
        for idx, (v, ti, t_abs) in enumerate(pred.frame_meta):
            fb = contexts[v][ti]
            flow = scene_flow(pred.gaussians[idx], t_abs, t_abs + dt)
            gt = fb.flow.reshape(-1, 3)
            sel = dynamic_mask(fb.flow, flow_threshold).reshape(-1) & (fb.sky_mask.reshape(-1) == 0)
            fm = flow_metrics(flow.vectors, gt, sel)
            if fm is not None:
                flow_rows.append(fm)

        entry = {"clip": ci}
        for name in ("full", "dynamic", "interpolation", "extrapolation"):
            rows = buckets[name]
            entry[name] = {
                "psnr": _mean_of([r["psnr"] for r in rows]),
                "ssim": _mean_of([r["ssim"] for r in rows]),
                "depth_rmse": _mean_of([r["depth_rmse"] for r in rows]),
            }
        entry["flow"] = (
            {k: _mean_of([r[k] for r in flow_rows]) for k in ("epe3d", "acc5", "acc10", "angular")}
            if flow_rows
            else None
        )
        per_clip.append(entry)

    aggregate = {}
    for name in ("full", "dynamic", "interpolation", "extrapolation"):
        aggregate[name] = {
            metric: _mean_of([c[name][metric] for c in per_clip])
            for metric in ("psnr", "ssim", "depth_rmse")
        }
    flow_entries = [c["flow"] for c in per_clip if c["flow"] is not None]
    aggregate["flow"] = (
        {k: _mean_of([f[k] for f in flow_entries]) for k in ("epe3d", "acc5", "acc10", "angular")}
        if flow_entries
        else None
    )
    n_ctx = context_count if context_count is not None else len(clips[0].context[0]) if clips else 0
    return EvalReport(
        per_clip=per_clip,
        aggregate=aggregate,
        context_count=n_ctx,
        num_clips=len(clips),
        flow_threshold=flow_threshold,
        runtime_per_clip_s=total_time / max(len(clips), 1),
    )


# -- minimal schema validation ----------------------------------------------------------


def validate_schema(instance, schema: dict, path: str = "$") -> list[str]:
    """Tiny structural validator for the shipped report/config schemas.

    Supports: type (object/array/number/integer/string/boolean/null),
    required, properties, items, and "nullable". Returns a list of problems.
    """
    problems = []
    types = {
        "object": dict, "array": list, "string": str, "boolean": bool,
        "number": (int, float), "integer": int, "null": type(None),
    }
    want = schema.get("type")
    if want is not None:
        if schema.get("nullable") and instance is None:
            return problems
        py = types[want]
        if not isinstance(instance, py) or (want == "number" and isinstance(instance, bool)):
            problems.append(f"{path}: expected {want}, got {type(instance).__name__}")
            return problems
    if want == "object":
        for key in schema.get("required", []):
            if key not in instance:
                problems.append(f"{path}: missing required key {key!r}")
        for key, sub in schema.get("properties", {}).items():
            if key in instance:
                problems.extend(validate_schema(instance[key], sub, f"{path}.{key}"))
    if want == "array" and "items" in schema:
        for i, item in enumerate(instance):
            problems.extend(validate_schema(item, schema["items"], f"{path}[{i}]"))
    return problems


def load_schema(name: str) -> dict:
    from importlib import resources

    with resources.files("dynsplat.schemas").joinpath(name).open() as fh:
        return json.load(fh)
