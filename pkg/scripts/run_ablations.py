"""Ablation sweeps over the training recipe's axes, driven through the CLI:
velocity-regularization weight, motion-token count, training-time context
timesteps, and zero-shot context-count transfer at eval time. Writes one
summary JSON; each arm also leaves its own run directory with manifest,
metrics log, and checkpoint.
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

from dynsplat.cli import main as cli


def run(argv: list[str]) -> int:
    print("$ dynsplat " + " ".join(argv), flush=True)
    return cli(argv)


def aggregate_of(eval_dir: Path) -> dict:
    return json.loads((eval_dir / "report.json").read_text())["aggregate"]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--root", default="ablations", help="output root directory")
    ap.add_argument("--clips", type=int, default=48)
    ap.add_argument("--eval-clips", type=int, default=8)
    ap.add_argument("--steps", type=int, default=600)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    root = Path(args.root)
    root.mkdir(parents=True, exist_ok=True)
    data = root / "data"
    summary: dict = {"steps": args.steps, "clips": args.clips}

    if not (data / "manifest.json").exists():
        assert run(["gen", "--out", str(data), "--seed", str(args.seed),
                    "--clips", str(args.clips), "--eval-clips", str(args.eval_clips)]) == 0

    base = ["--dataset", str(data), "--steps", str(args.steps), "--seed", str(args.seed),
            "--batch-size", "2"]

    summary["lambda_reg"] = {}
    for lam in ("5e-4", "5e-3", "5e-2"):
        out = root / f"reg_{lam}"
        if not out.exists():
            assert run(["train", "--out", str(out), *base, "--lambda-reg", lam]) == 0
        ev = root / f"reg_{lam}_eval"
        if not ev.exists():
            assert run(["eval", "--out", str(ev), "--checkpoint", str(out / "checkpoint"),
                        "--dataset", str(data)]) == 0
        summary["lambda_reg"][lam] = aggregate_of(ev)

    summary["motion_tokens"] = {}
    for m in (0, 1, 4, 16):
        out = root / f"m_{m}"
        if not out.exists():
            assert run(["train", "--out", str(out), *base, "--motion-tokens", str(m)]) == 0
        ev = root / f"m_{m}_eval"
        if not ev.exists():
            assert run(["eval", "--out", str(ev), "--checkpoint", str(out / "checkpoint"),
                        "--dataset", str(data)]) == 0
        summary["motion_tokens"][m] = aggregate_of(ev)

    summary["train_contexts"] = {}
    for n in (1, 2, 4):
        out = root / f"ctx_{n}"
        if not out.exists():
            assert run(["train", "--out", str(out), *base, "--context-timesteps", str(n)]) == 0
        ev = root / f"ctx_{n}_eval"
        if not ev.exists():
            assert run(["eval", "--out", str(ev), "--checkpoint", str(out / "checkpoint"),
                        "--dataset", str(data), "--context", str(n)]) == 0
        summary["train_contexts"][n] = aggregate_of(ev)

    summary["zero_shot_contexts"] = {}
    four_ctx = root / "m_4" / "checkpoint"
    for n in (1, 2, 4, 6):
        ev = root / f"zs_{n}_eval"
        if not ev.exists():
            assert run(["eval", "--out", str(ev), "--checkpoint", str(four_ctx),
                        "--dataset", str(data), "--context", str(n)]) == 0
        summary["zero_shot_contexts"][n] = aggregate_of(ev)

    (root / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    print(json.dumps(summary, indent=1, sort_keys=True))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
