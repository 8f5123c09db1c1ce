"""Optimization loop: AdamW with linear-warmup cosine schedule, target-time
sampling, gradient clipping, metrics logging, and bit-exact checkpointing.

Training is a deterministic function of (dataset, config, seed): the data
order, target sampling, and parameter updates all flow from one seeded
generator whose state is stored in every checkpoint, so a resumed run
reproduces the uninterrupted one bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses as lmod
from . import tensor as tp
from .losses import LossWeights, NonFiniteLossError
from .model import Model, ModelConfig
from .synthgen import ClipRecord
from .tensor import Tensor

CHECKPOINT_VERSION = 1


class TrainAbort(RuntimeError):
    """Raised when training hits a non-finite loss; carries the dump path."""

    def __init__(self, message: str, dump_path: str | None = None):
        super().__init__(message)
        self.dump_path = dump_path


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 4
    peak_lr: float = 4e-4
    warmup_frac: float = 0.05
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float | None = 1.0
    seed: int = 0
    targets_per_clip: int = 4
    views_per_target: int | None = None  # None = supervise every camera per sampled time
    eval_every: int = 0
    nan_skip_limit: int = 10  # consecutive non-finite-gradient steps before aborting
    loss: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossWeights.from_dict(self.loss)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.warmup_frac < 1:
            raise ValueError("warmup_frac must lie in [0, 1)")

    @property
    def warmup_steps(self) -> int:
        return max(int(round(self.warmup_frac * self.steps)), 1)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["loss"] = self.loss.to_dict()
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        return TrainConfig(**d)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear ramp to the peak over the warmup, then cosine decay to zero."""
    if step < 0 or step > cfg.steps:
        raise ValueError(f"step {step} outside [0, {cfg.steps}]")
    w = cfg.warmup_steps
    if step < w:
        return cfg.peak_lr * step / w
    span = max(cfg.steps - w, 1)
    progress = (step - w) / span
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    nan_skips: int = 0

    @staticmethod
    def init(params: dict[str, Tensor]) -> "AdamState":
        return AdamState(
            m={k: np.zeros_like(p.numpy()) for k, p in params.items()},
            v={k: np.zeros_like(p.numpy()) for k, p in params.items()},
        )


def adamw_step(params: dict[str, Tensor], state: AdamState, lr: float, cfg: TrainConfig) -> bool:
    """Decoupled-weight-decay Adam update in place; skips on non-finite grads."""
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.numpy())) for k, p in params.items()}
    if any(not np.isfinite(g).all() for g in grads.values()):
        state.nan_skips += 1
        return False
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for k, p in params.items():
        g = grads[k]
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * (g * g)
        mhat = state.m[k] / bc1
        vhat = state.v[k] / bc2
        p.data = p.data - (lr * (mhat / (np.sqrt(vhat) + cfg.eps))).astype(p.dtype)
        if cfg.weight_decay:
            p.data = p.data - (lr * cfg.weight_decay) * p.data
    return True


def clip_gradients(params: dict[str, Tensor], max_norm: float | None) -> float:
    """Scale all gradients so their global norm is at most ``max_norm``; returns the raw norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if max_norm is not None and norm > max_norm and norm > 0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def clip_loss(
    model: Model, clip: ClipRecord, rng: np.random.Generator, cfg: TrainConfig, step: int
) -> dict[str, Tensor]:
    """Forward one clip: reconstruct, sample target times, render, and score."""
    spec = clip.spec
    pred = model.reconstruct(clip.context, clip.start_time, spec.clip_length)
    n_tgt = len(clip.targets[0])
    take = min(cfg.targets_per_clip, n_tgt)
    chosen = rng.permutation(n_tgt)[:take]
    recon_terms, sky_terms = [], []
    for ti in sorted(int(i) for i in chosen):
        if cfg.views_per_target is None or cfg.views_per_target >= spec.num_cameras:
            views = range(spec.num_cameras)
        else:
            views = [int(v) for v in rng.permutation(spec.num_cameras)[: cfg.views_per_target]]
        for v in views:
            fb = clip.targets[v][ti]
            out = model.render_at(pred, fb.camera, fb.time)
            gt_rgb = fb.image.astype(np.float64) * 2.0 - 1.0
            valid = fb.sky_mask == 0
            recon_terms.append(
                lmod.recon_loss(out.corrected, gt_rgb, out.depth, fb.depth, valid, cfg.loss, step)
            )
            sky_terms.append(lmod.sky_loss(out.opacity, fb.sky_mask, mse=cfg.loss.sky_loss_mse))
    n = float(len(recon_terms))
    recon = recon_terms[0]
    for t in recon_terms[1:]:
        recon = recon + t
    sky = sky_terms[0]
    for t in sky_terms[1:]:
        sky = sky + t
    all_vel = tp.concat([g.velocities for g in pred.gaussians], axis=0)
    return {"recon": recon * (1.0 / n), "sky": sky * (1.0 / n), "reg": lmod.velocity_reg(all_vel)}


def train_step(
    model: Model,
    batch: list[ClipRecord],
    opt: AdamState,
    rng: np.random.Generator,
    cfg: TrainConfig,
    step: int,
) -> dict[str, float]:
    """One optimization step over a batch of clips; returns logged scalars."""
    parts_acc: dict[str, Tensor] | None = None
    for clip in batch:
        parts = clip_loss(model, clip, rng, cfg, step)
        if parts_acc is None:
            parts_acc = parts
        else:
            parts_acc = {k: parts_acc[k] + parts[k] for k in parts_acc}
    scale = 1.0 / len(batch)
    parts_acc = {k: v * scale for k, v in parts_acc.items()}
    total = lmod.total_loss(parts_acc, cfg.loss)  # raises NonFiniteLossError on NaN/Inf
    for p in model.params.values():
        p.grad = None
    tp.backward(total)
    grad_norm = clip_gradients(model.params, cfg.grad_clip)
    lr = lr_at(step, cfg)
    applied = adamw_step(model.params, opt, lr, cfg)
    out = {k: float(v.numpy()) for k, v in parts_acc.items()}
    out.update(total=float(total.numpy()), lr=lr, grad_norm=grad_norm, applied=float(applied))
    return out


class MetricsLog:
    """Line-delimited (step, term, value) records."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, step: int, values: dict[str, float]) -> None:
        with open(self.path, "a") as fh:
            for term, value in values.items():
                fh.write(json.dumps({"step": step, "term": term, "value": value}) + "\n")


class Trainer:
    def __init__(self, model: Model, clips: list[ClipRecord], cfg: TrainConfig, metrics_path=None):
        if not clips:
            raise ValueError("trainer needs at least one clip")
        self.model = model
        self.clips = clips
        self.cfg = cfg
        self.opt = AdamState.init(model.params)
        self.rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7472]))
        self.step = 0
        self.metrics = MetricsLog(metrics_path) if metrics_path else None

    def _sample_batch(self) -> list[ClipRecord]:
        idx = self.rng.integers(0, len(self.clips), size=self.cfg.batch_size)
        return [self.clips[int(i)] for i in idx]

    def step_once(self) -> dict[str, float]:
        batch = self._sample_batch()
        try:
            values = train_step(self.model, batch, self.opt, self.rng, self.cfg, self.step)
        except NonFiniteLossError as exc:
            dump = self._dump_diagnostics(exc)
            raise TrainAbort(f"non-finite loss at step {self.step} (diagnostics: {dump})", dump) from exc
        self.step += 1
        if self.metrics:
            self.metrics.append(self.step, values)
        if values["applied"]:
            self._consecutive_skips = 0
        else:
            self._consecutive_skips = getattr(self, "_consecutive_skips", 0) + 1
            if self._consecutive_skips >= self.cfg.nan_skip_limit:
                # gradient explosion: gradients stay non-finite, training cannot move
                exc = NonFiniteLossError({"grad_norm": values["grad_norm"], **{k: values[k] for k in ("recon", "sky", "reg")}})
                dump = self._dump_diagnostics(exc)
                raise TrainAbort(
                    f"{self._consecutive_skips} consecutive non-finite-gradient steps at step {self.step} "
                    f"(diagnostics: {dump})",
                    dump,
                )
        return values

    def run(self, n_steps: int | None = None, eval_fn=None, progress_every: int = 0) -> None:
        target = self.cfg.steps if n_steps is None else self.step + n_steps
        while self.step < target:
            values = self.step_once()
            if progress_every and self.step % progress_every == 0:
                print(f"step {self.step}: total={values['total']:.5f} grad_norm={values['grad_norm']:.3f}",
                      flush=True)
            if self.cfg.eval_every and self.step % self.cfg.eval_every == 0:
                self._log_velocity_diagnostic()
                if eval_fn is not None:
                    eval_fn(self.model, self.step)

    def _log_velocity_diagnostic(self) -> None:
        # the two-sided velocity's backward branch points along motion
        # history; report how far learned velocities are from v- = -v+
        with tp.no_grad():
            clip = self.clips[0]
            pred = self.model.reconstruct(clip.context, clip.start_time, clip.spec.clip_length)
            v = np.concatenate([g.velocities.numpy() for g in pred.gaussians])
        mirror = np.linalg.norm(v[:, 0:3] + v[:, 3:6], axis=1).mean()
        differ = np.linalg.norm(v[:, 0:3] - v[:, 3:6], axis=1).mean()
        if self.metrics:
            self.metrics.append(self.step, {"v_mirror_residual": float(mirror), "v_branch_gap": float(differ)})

    def _dump_diagnostics(self, exc: NonFiniteLossError) -> str:
        path = (self.metrics.path.parent if self.metrics else Path(".")) / f"nan_dump_step{self.step}.json"
        payload = {
            "step": self.step,
            "parts": exc.parts,
            "nan_skips": self.opt.nan_skips,
            "config": self.cfg.to_dict(),
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
        return str(path)


# -- checkpoints ------------------------------------------------------------------------


def checkpoint_save(path, model: Model, trainer: Trainer | None = None) -> None:
    """Manifest JSON (names, shapes, dtypes, offsets) plus one little-endian blob."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors: list[tuple[str, np.ndarray]] = [(f"param/{k}", p.numpy()) for k, p in model.params.items()]
    if trainer is not None:
        tensors += [(f"adam_m/{k}", v) for k, v in trainer.opt.m.items()]
        tensors += [(f"adam_v/{k}", v) for k, v in trainer.opt.v.items()]
    entries = []
    offset = 0
    with open(path / "blob.bin", "wb") as fh:
        for name, arr in tensors:
            arr = np.ascontiguousarray(arr)
            raw = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
            entries.append(
                {"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype), "offset": offset,
                 "nbytes": len(raw)}
            )
            fh.write(raw)
            offset += len(raw)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "tensors": entries,
        "training_state": None,
    }
    if trainer is not None:
        manifest["training_state"] = {
            "step": trainer.step,
            "adam_t": trainer.opt.t,
            "nan_skips": trainer.opt.nan_skips,
            "rng_state": trainer.rng.bit_generator.state,
            "train_config": trainer.cfg.to_dict(),
        }
    with open(path / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def _read_blob(path: Path, entries: list[dict]) -> dict[str, np.ndarray]:
    blob = (path / "blob.bin").read_bytes()
    out = {}
    for e in entries:
        raw = blob[e["offset"] : e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{path}: blob truncated at tensor {e['name']!r}")
        out[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return out


def checkpoint_load(path, clips: list[ClipRecord] | None = None) -> tuple[Model, Trainer | None]:
    """Rebuild the model (and trainer state when present) from a checkpoint."""
    path = Path(path)
    try:
        with open(path / "manifest.json") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise CheckpointError(f"{path}: no checkpoint manifest found") from None
    if manifest["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {manifest['format_version']} != {CHECKPOINT_VERSION}")
    config = ModelConfig.from_dict(manifest["model_config"])
    model = Model.init(config, seed=0)
    data = _read_blob(path, manifest["tensors"])
    mismatches = []
    for k, p in model.params.items():
        arr = data.get(f"param/{k}")
        if arr is None:
            mismatches.append(f"missing param/{k}")
        elif tuple(arr.shape) != tuple(p.shape):
            mismatches.append(f"param/{k}: checkpoint {tuple(arr.shape)} vs model {tuple(p.shape)}")
    extra = [n for n in data if n.startswith("param/") and n[6:] not in model.params]
    mismatches += [f"unexpected {n}" for n in extra]
    if mismatches:
        raise CheckpointError(f"{path}: shape/name mismatch:\n  " + "\n  ".join(mismatches))
    for k, p in model.params.items():
        p.data = data[f"param/{k}"].astype(p.dtype)

    state = manifest.get("training_state")
    trainer = None
    if state is not None and clips is not None:
        trainer = Trainer(model, clips, TrainConfig.from_dict(state["train_config"]))
        trainer.step = state["step"]
        trainer.opt = AdamState.init(model.params)
        trainer.opt.t = state["adam_t"]
        trainer.opt.nan_skips = state["nan_skips"]
        for k in model.params:
            trainer.opt.m[k] = data[f"adam_m/{k}"]
            trainer.opt.v[k] = data[f"adam_v/{k}"]
        trainer.rng.bit_generator.state = state["rng_state"]
    return model, trainer
