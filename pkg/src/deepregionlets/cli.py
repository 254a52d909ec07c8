"""Command-line entry points.

Exit codes: 0 success, 1 check failed or runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import gradcheck
from .configfile import ConfigError, load_config
from .geometry import ProjectiveTransform, RegionOfInterest, denormalize, generate_grid
from .tensorfile import write_tensor
from .toybench import TrainConfig, format_ablation, run_ablation, train

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _floats(text: str, count: int, what: str) -> list[float]:
    parts = [p for p in text.replace(" ", "").split(",") if p]
    if len(parts) != count:
        raise UsageError(f"{what} needs {count} comma-separated numbers, got {len(parts)}")
    try:
        vals = [float(p) for p in parts]
    except ValueError:
        raise UsageError(f"{what}: could not parse {text!r}") from None
    if not all(np.isfinite(vals)):
        raise UsageError(f"{what} must be finite")
    return vals


def _hw(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"--hw expects HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise UsageError("--hw sizes must be positive")
    return h, w


def _load(path) -> TrainConfig:
    if path is None:
        return TrainConfig()
    try:
        return load_config(path)
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from None
    except ConfigError as exc:
        raise UsageError(f"bad config {path}: {exc}") from None


def cmd_gradcheck(args) -> int:
    if args.cases < 1:
        raise UsageError("--cases must be positive")
    results = gradcheck.run_suite(args.seed, args.cases, args.precision)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print("gradcheck: " + ("all checks passed" if ok else "FAILED"))
    return EXIT_OK if ok else EXIT_FAIL


def save_training(out: Path, report, model) -> None:
    """report.txt, loss_curve.rglt (per iteration), epoch_losses.rglt,
    metrics.rglt (accuracy, mean IoU, diverged) and params/<name>.rglt."""
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(report.to_text())
    write_tensor(out / "loss_curve.rglt", np.asarray(report.iteration_losses, dtype=np.float64))
    write_tensor(out / "epoch_losses.rglt", np.asarray(report.epoch_losses, dtype=np.float64))
    write_tensor(out / "metrics.rglt", report.metrics())
    params = out / "params"
    params.mkdir(exist_ok=True)
    for name, p in model.named_parameters().items():
        write_tensor(params / f"{name}.rglt", p.value)


def cmd_train(args) -> int:
    config = _load(args.config)
    with threadpool_limits(limits=1):
        report, model = train(config)
    save_training(Path(args.out), report, model)
    print(f"final_accuracy = {report.final_accuracy:.4f}")
    print(f"mean_iou = {report.mean_iou:.4f}")
    if report.diverged:
        print("training diverged (non-finite loss)", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_ablation(args) -> int:
    config = _load(args.config)
    with threadpool_limits(limits=1):
        rows = run_ablation(config)
    table = format_ablation(rows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.txt").write_text(table)
    for name, report in rows:
        (out / f"{name}_report.txt").write_text(report.to_text())
    print(table, end="")
    return EXIT_FAIL if any(r.diverged for _, r in rows) else EXIT_OK


def cmd_dumpgrid(args) -> int:
    theta = _floats(args.theta, 8, "--theta")
    roi_vals = _floats(args.roi, 4, "--roi")
    H, W = _hw(args.hw)
    try:
        t = ProjectiveTransform(theta)
        roi = RegionOfInterest(*roi_vals)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    x_abs, y_abs = denormalize(generate_grid(t, H, W), roi)
    grid = np.stack([x_abs, y_abs], axis=-1).reshape(H, W, 2)
    write_tensor(args.out, np.ascontiguousarray(grid, dtype=np.float64))
    print(f"wrote {H}x{W}x2 grid to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="deepregionlets", description="Deep regionlet toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--cases", type=int, default=100)
    g.add_argument("--precision", choices=sorted(gradcheck.DTYPES), default="f64")
    g.set_defaults(func=cmd_gradcheck)

    t = sub.add_parser("train", help="train the toy detector")
    t.add_argument("--config", default=None, help="key = value config file (defaults if omitted)")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablation", help="global / offset-only / non-gating / full comparison")
    a.add_argument("--config", default=None)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablation)

    d = sub.add_parser("dumpgrid", help="write the sampling grid of a transform")
    d.add_argument("--theta", required=True, help="eight comma-separated values")
    d.add_argument("--roi", required=True, help="w0,h0,w,h")
    d.add_argument("--hw", required=True, help="HxW")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_dumpgrid)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("DEEPREGIONLETS_LOG", "WARNING").upper(),
                        format="%(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
