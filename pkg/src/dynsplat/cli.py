"""Command-line workflows: gen, train, eval, render, flow, track, segment,
merge, gradcheck, plot.

Every command writes into a temp directory that is atomically promoted on
success, guards its output with a lock file, and leaves a run manifest
(command, config hash, dataset hash, seed, code version, timestamps,
artifact list) from which the run can be reproduced. Flags mirror config
keys one to one; a JSON config file may set any of them and flags win.
The environment variable DYNSPLAT_DATA_ROOT anchors relative dataset paths.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

from pathlib import Path

import numpy as np

from . import __version__, dynamics, evalkit, pngio, splatter
from . import tensor as tp
from .model import Model, ModelConfig
from .synthgen import (
    ClipRecord,
    GeneratorConfig,
    camera_at,
    context_times_for,
    dataset_hash,
    generate_scene,
    make_clip,
    read_dataset,
    render_oracle,
    write_dataset,
)
from .trainer import TrainAbort, TrainConfig, Trainer, checkpoint_load, checkpoint_save

EXIT_OK = 0
EXIT_ERROR = 2
EXIT_NAN_ABORT = 3


class CliError(RuntimeError):
    pass


# -- output directory protocol ------------------------------------------------------


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(_canonical(obj).encode()).hexdigest()[:16]


class OutputDir:
    """Lock, write into a temp path, promote atomically, leave a manifest."""

    def __init__(self, final: Path, force: bool = False):
        self.final = Path(final)
        self.force = force
        self.tmp = self.final.parent / (self.final.name + f".tmp-{os.getpid()}")
        self.lock = self.final.parent / (self.final.name + ".lock")

    def __enter__(self) -> Path:
        self.final.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise CliError(f"{self.final}: locked by another process ({self.lock} exists)") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        if self.final.exists():
            if not self.force:
                self._unlock()
                raise CliError(f"{self.final}: output exists (use --force to overwrite)")
            import shutil

            shutil.rmtree(self.final)
        if self.tmp.exists():
            import shutil

            shutil.rmtree(self.tmp)
        self.tmp.mkdir(parents=True)
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                os.replace(self.tmp, self.final)
            else:
                import shutil

                shutil.rmtree(self.tmp, ignore_errors=True)
        finally:
            self._unlock()
        return False

    def _unlock(self):
        try:
            os.unlink(self.lock)
        except FileNotFoundError:
            pass


def write_manifest(out: Path, command: str, config: dict, seed: int | None, ds_hash: str | None,
                   artifacts: list[str], started: float) -> None:
    manifest = {
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "dataset_hash": ds_hash,
        "seed": seed,
        "code_version": __version__,
        "started_unix": started,
        "finished_unix": time.time(),
        "artifacts": sorted(artifacts),
    }
    with open(out / "run_manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def verify_manifest(out_dir) -> dict:
    """Recompute the config hash stored in a run manifest; raises on mismatch."""
    with open(Path(out_dir) / "run_manifest.json") as fh:
        manifest = json.load(fh)
    if config_hash(manifest["config"]) != manifest["config_hash"]:
        raise CliError(f"{out_dir}: manifest config hash mismatch")
    return manifest


def _data_root() -> Path:
    return Path(os.environ.get("DYNSPLAT_DATA_ROOT", "."))


def _resolve(path: str) -> Path:
    p = Path(path)
    return p if p.is_absolute() else _data_root() / p


# -- config plumbing ------------------------------------------------------------------


def load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    with open(_resolve(path)) as fh:
        cfg = json.load(fh)
    problems = evalkit.validate_schema(cfg, evalkit.load_schema("run_config.schema.json"))
    if problems:
        raise CliError("config file invalid:\n  " + "\n  ".join(problems))
    return cfg


def _apply_overrides(base: dict, overrides: dict) -> dict:
    out = dict(base)
    for k, v in overrides.items():
        if v is not None:
            out[k] = v
    return out


def build_model_config(cfg_file: dict, args) -> ModelConfig:
    base = ModelConfig().to_dict()
    base = _apply_overrides(base, cfg_file.get("model", {}))
    flag_map = {
        "num_motion_tokens": args.motion_tokens,
        "freeze_velocities": True if getattr(args, "freeze_velocities", False) else None,
        "embed_dim": getattr(args, "embed_dim", None),
        "depth": getattr(args, "model_depth", None),
        "far": getattr(args, "far", None),
    }
    return ModelConfig.from_dict(_apply_overrides(base, flag_map))


def build_train_config(cfg_file: dict, args) -> TrainConfig:
    base = TrainConfig().to_dict()
    base = _apply_overrides(base, cfg_file.get("train", {}))
    loss = _apply_overrides(base["loss"], {"lambda_reg": args.lambda_reg, "lambda_sky": args.lambda_sky})
    flag_map = {
        "steps": args.steps,
        "batch_size": args.batch_size,
        "peak_lr": args.lr,
        "seed": args.seed,
        "eval_every": args.eval_every,
        "grad_clip": None,  # handled below: tri-state
    }
    merged = _apply_overrides(base, {k: v for k, v in flag_map.items() if k != "grad_clip"})
    merged["loss"] = loss
    if getattr(args, "no_grad_clip", False):
        merged["grad_clip"] = None
    return TrainConfig.from_dict(merged)


def _load_clips(dataset: str, split: str | None) -> list[ClipRecord]:
    clips = read_dataset(_resolve(dataset), split=split)
    if not clips:
        raise CliError(f"{dataset}: no clips in split {split!r}")
    return clips


def _rebuild_contexts(clips: list[ClipRecord], n_context: int) -> list[ClipRecord]:
    """Re-render context frames at n evenly spaced timesteps from the stored specs."""
    out = []
    for clip in clips:
        times = context_times_for(clip.spec, clip.start_time, n_context)
        ctx = [
            [render_oracle(clip.spec, camera_at(clip.spec, v, t, clip.world_from_scene), t, clip.world_from_scene)
             for t in times]
            for v in range(clip.spec.num_cameras)
        ]
        out.append(ClipRecord(context=ctx, targets=clip.targets, spec=clip.spec,
                              start_time=clip.start_time, world_from_scene=clip.world_from_scene))
    return out


# -- subcommands -----------------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg_file = load_config_file(args.config)
    gen_dict = _apply_overrides(GeneratorConfig().to_dict(), cfg_file.get("generator", {}))
    gen_dict = _apply_overrides(
        gen_dict,
        {
            "width": args.width,
            "height": args.height,
            "num_cameras": args.cameras,
            "frames_per_clip": args.frames,
            "static_only": True if args.static_only else None,
            "exposure": True if args.exposure else None,
        },
    )
    gen_cfg = GeneratorConfig.from_dict(gen_dict)
    started = time.time()
    with OutputDir(_resolve(args.out), force=args.force) as tmp:
        clips: list[tuple[str, ClipRecord]] = []
        if args.sequence > 1:
            spec = generate_scene(args.seed, gen_cfg)
            for k in range(args.sequence):
                clips.append(("sequence", make_clip(spec, start_time=k * spec.clip_length)))
        else:
            for i in range(args.clips):
                clips.append(("train", make_clip(generate_scene(args.seed + i, gen_cfg))))
            for i in range(args.eval_clips):
                clips.append(("eval", make_clip(generate_scene(args.seed + 100_000 + i, gen_cfg))))
        ds_hash = write_dataset(tmp, clips, gen_cfg)
        write_manifest(tmp, "gen", {"generator": gen_cfg.to_dict(), "clips": args.clips,
                                    "eval_clips": args.eval_clips, "sequence": args.sequence},
                       args.seed, ds_hash, ["manifest.json", "clips/"], started)
    print(f"dataset written to {args.out} (hash {ds_hash[:16]})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg_file = load_config_file(args.config)
    model_cfg = build_model_config(cfg_file, args)
    train_cfg = build_train_config(cfg_file, args)
    clips = _load_clips(args.dataset, "train")
    if args.context_timesteps is not None and args.context_timesteps != len(clips[0].context[0]):
        clips = _rebuild_contexts(clips, args.context_timesteps)
    ds_hash = dataset_hash(_resolve(args.dataset))
    started = time.time()
    aborted = False
    with OutputDir(_resolve(args.out), force=args.force) as tmp:
        model = Model.init(model_cfg, seed=train_cfg.seed)
        trainer = Trainer(model, clips, train_cfg, metrics_path=tmp / "metrics.jsonl")

        def snapshot(mdl, step):
            checkpoint_save(tmp / f"snapshot_{step:06d}", mdl, trainer)

        try:
            trainer.run(eval_fn=snapshot if args.snapshots else None,
                        progress_every=args.progress_every)
        except TrainAbort:
            # keep the diagnostics: the dump file sits next to the metrics log
            aborted = True
        checkpoint_save(tmp / ("aborted" if aborted else "checkpoint"), model, trainer)
        write_manifest(tmp, "train",
                       {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(),
                        "context_timesteps": args.context_timesteps, "aborted": aborted},
                       train_cfg.seed, ds_hash,
                       ["metrics.jsonl", "aborted/" if aborted else "checkpoint/"], started)
    if aborted:
        print(f"training aborted on non-finite loss; diagnostics under {args.out}", file=sys.stderr)
        return EXIT_NAN_ABORT
    print(f"trained {train_cfg.steps} steps -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _ = checkpoint_load(_resolve(args.checkpoint))
    clips = _load_clips(args.dataset, args.split)
    if args.max_clips:
        clips = clips[: args.max_clips]
    started = time.time()
    report = evalkit.evaluate(model, clips, context_count=args.context)
    body = json.loads(report.to_json())
    problems = evalkit.validate_schema(body, evalkit.load_schema("eval_report.schema.json"))
    if problems:
        raise CliError("eval report failed schema validation:\n  " + "\n  ".join(problems))
    with OutputDir(_resolve(args.out), force=args.force) as tmp:
        (tmp / "report.json").write_text(report.to_json())
        write_manifest(tmp, "eval",
                       {"checkpoint": str(args.checkpoint), "context": args.context,
                        "split": args.split, "runtime_per_clip_s": report.runtime_per_clip_s},
                       None, dataset_hash(_resolve(args.dataset)), ["report.json"], started)
    agg = body["aggregate"]
    print(f"full PSNR {agg['full']['psnr']}, dynamic PSNR {agg['dynamic']['psnr']}, "
          f"flow {agg['flow']}")
    return EXIT_OK


def _predict_for_clip(args, need_trainer: bool = False):
    model, _ = checkpoint_load(_resolve(args.checkpoint))
    clips = _load_clips(args.dataset, args.split)
    if args.clip >= len(clips):
        raise CliError(f"clip index {args.clip} out of range ({len(clips)} clips)")
    clip = clips[args.clip]
    with tp.no_grad():
        pred = model.reconstruct(clip.context, clip.start_time, clip.spec.clip_length)
    return model, clip, pred


def cmd_render(args) -> int:
    model, clip, pred = _predict_for_clip(args)
    spec = clip.spec
    if args.time is not None and not (clip.start_time <= args.time <= clip.start_time + spec.clip_length):
        raise CliError(f"time {args.time} outside clip range "
                       f"[{clip.start_time}, {clip.start_time + spec.clip_length}]")
    started = time.time()
    with OutputDir(_resolve(args.out), force=args.force) as tmp:
        artifacts = []
        targets = ([(args.view, args.time)] if args.time is not None
                   else [(v, fb.time) for v in range(spec.num_cameras) for fb in clip.targets[v]])
        for v, t in targets:
            cam = camera_at(spec, v, t, clip.world_from_scene)
            with tp.no_grad():
                out = model.render_at(pred, cam, t)
            name = f"render_v{v}_t{t:.3f}.png"
            pngio.write_png(tmp / name, pngio.to_uint8(out.corrected.numpy()))
            artifacts.append(name)
        write_manifest(tmp, "render", {"clip": args.clip, "time": args.time, "view": args.view},
                       None, dataset_hash(_resolve(args.dataset)), artifacts, started)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_flow(args) -> int:
    model, clip, pred = _predict_for_clip(args)
    dt = clip.spec.frame_interval
    started = time.time()
    with OutputDir(_resolve(args.out), force=args.force) as tmp:
        artifacts = []
        for idx, (v, ti, t_abs) in enumerate(pred.frame_meta):
            flow = dynamics.scene_flow(pred.gaussians[idx], t_abs, t_abs + dt)
            prefix = tmp / f"flow_v{v}_f{ti}"
            dynamics.write_flow(prefix, flow, meta={"time": t_abs, "interval": dt, "clip": args.clip})
            artifacts += [f"flow_v{v}_f{ti}.bin", f"flow_v{v}_f{ti}.json"]
        write_manifest(tmp, "flow", {"clip": args.clip}, None,
                       dataset_hash(_resolve(args.dataset)), artifacts, started)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_track(args) -> int:
    model, clip, pred = _predict_for_clip(args)
    by_time: dict[float, list] = {}
    for idx, (v, ti, t_abs) in enumerate(pred.frame_meta):
        by_time.setdefault(t_abs, []).append(pred.gaussians[idx].detached())
    times = sorted(by_time)
    clouds = [dynamics.aggregate(by_time[t], t) for t in times]
    trajs = dynamics.chain_trajectories(clouds, times, threshold=args.threshold)
    started = time.time()
    with OutputDir(_resolve(args.out), force=args.force) as tmp:
        dynamics.write_trajectories(tmp / "tracks.txt", trajs)
        write_manifest(tmp, "track", {"clip": args.clip, "threshold": args.threshold}, None,
                       dataset_hash(_resolve(args.dataset)), ["tracks.txt"], started)
    print(f"{len(trajs)} trajectories -> {args.out}")
    return EXIT_OK


_LABEL_COLORS = np.array(
    [[230, 70, 60], [60, 130, 220], [70, 180, 90], [240, 180, 60], [150, 90, 190],
     [90, 200, 200], [220, 120, 180], [140, 140, 140]], dtype=np.uint8,
)


def cmd_segment(args) -> int:
    model, clip, pred = _predict_for_clip(args)
    h, w = clip.spec.height, clip.spec.width
    started = time.time()
    with OutputDir(_resolve(args.out), force=args.force) as tmp:
        artifacts = []
        for idx, (v, ti, t_abs) in enumerate(pred.frame_meta):
            weights = pred.weights[idx].numpy().reshape(h, w, -1)
            labels = dynamics.motion_segmentation(weights)
            rgb = _LABEL_COLORS[labels % len(_LABEL_COLORS)]
            name = f"segment_v{v}_f{ti}.png"
            pngio.write_png(tmp / name, rgb)
            np.save(tmp / f"labels_v{v}_f{ti}.npy", labels)
            artifacts += [name, f"labels_v{v}_f{ti}.npy"]
        write_manifest(tmp, "segment", {"clip": args.clip}, None,
                       dataset_hash(_resolve(args.dataset)), artifacts, started)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_merge(args) -> int:
    model, _ = checkpoint_load(_resolve(args.checkpoint))
    clips = _load_clips(args.dataset, args.split)
    started = time.time()
    merged_inputs = []
    for clip in clips:
        with tp.no_grad():
            pred = model.reconstruct(clip.context, clip.start_time, clip.spec.clip_length)
            agg = dynamics.aggregate([g.detached() for g in pred.gaussians],
                                     clip.start_time + clip.spec.clip_length / 2)
        merged_inputs.append((agg, clip.world_from_scene))
    merged = dynamics.merge_clips(merged_inputs)
    with OutputDir(_resolve(args.out), force=args.force) as tmp:
        splatter.write_ply(tmp / "merged.ply", merged)
        write_manifest(tmp, "merge", {"clips": len(clips)}, None,
                       dataset_hash(_resolve(args.dataset)), ["merged.ply"], started)
    print(f"merged {len(clips)} clips, {len(merged)} gaussians -> {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    results = run_gradcheck(fast=args.fast)
    worst = max(r.error for r in results)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"[{status}] {r.name}: max rel err {r.error:.3e} (tol {r.tolerance})")
    if all(r.passed for r in results):
        print(f"gradcheck passed ({len(results)} checks, worst {worst:.3e})")
        return EXIT_OK
    print("gradcheck FAILED", file=sys.stderr)
    return EXIT_ERROR


def cmd_plot(args) -> int:
    path = _resolve(args.metrics)
    rows = [json.loads(line) for line in open(path)]
    terms = args.terms.split(",") if args.terms else sorted({r["term"] for r in rows})
    curves = {}
    for term in terms:
        pts = [(r["step"], r["value"]) for r in rows if r["term"] == term]
        if pts:
            xs, ys = zip(*pts)
            curves[term] = (np.array(xs, float), np.array(ys, float))
    if not curves:
        raise CliError(f"no matching terms in {args.metrics}")
    out = _resolve(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    pngio.plot_curves(out, curves)
    print(f"wrote {args.out} ({', '.join(sorted(curves))})")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dynsplat", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common_out(p):
        p.add_argument("--out", required=True)
        p.add_argument("--force", action="store_true", help="overwrite existing output")

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    common_out(p)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--clips", type=int, default=200)
    p.add_argument("--eval-clips", type=int, default=20)
    p.add_argument("--sequence", type=int, default=1, help="N consecutive clips of one scene")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--cameras", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--static-only", action="store_true")
    p.add_argument("--exposure", action="store_true")
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="train a model on a dataset")
    common_out(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--config")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--lambda-reg", type=float)
    p.add_argument("--lambda-sky", type=float)
    p.add_argument("--motion-tokens", type=int)
    p.add_argument("--context-timesteps", type=int)
    p.add_argument("--no-grad-clip", action="store_true")
    p.add_argument("--freeze-velocities", action="store_true")
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--model-depth", type=int)
    p.add_argument("--far", type=float)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--snapshots", action="store_true")
    p.add_argument("--progress-every", type=int, default=0)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    common_out(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="eval")
    p.add_argument("--context", type=int, help="zero-shot context timestep count")
    p.add_argument("--max-clips", type=int)
    p.set_defaults(fn=cmd_eval)

    for name, fn in (("render", cmd_render), ("flow", cmd_flow), ("track", cmd_track), ("segment", cmd_segment)):
        p = sub.add_parser(name)
        common_out(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--dataset", required=True)
        p.add_argument("--split", default="eval")
        p.add_argument("--clip", type=int, default=0)
        if name == "render":
            p.add_argument("--view", type=int, default=0)
            p.add_argument("--time", type=float, help="render time; omit for all target frames")
        if name == "track":
            p.add_argument("--threshold", type=float, default=0.05)
        p.set_defaults(fn=fn)

    p = sub.add_parser("merge", help="merge per-clip predictions into one PLY")
    common_out(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="sequence")
    p.set_defaults(fn=cmd_merge)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--fast", action="store_true", help="skip the slowest pipeline checks")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("plot", help="render metric curves from a metrics log to PNG")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--terms", help="comma-separated term names (default: all)")
    p.set_defaults(fn=cmd_plot)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
