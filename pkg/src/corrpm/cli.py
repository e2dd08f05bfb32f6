"""Command line entry point: ``python -m corrpm <subcommand>``.

Reports are written as JSON; tables are also printed as aligned text. On
failure a single JSON line ``{"error": ..., "message": ...}`` goes to stderr
and the exit status is nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from corrpm import checks
from corrpm.harness import BENCHMARK_LR, TrainConfig, ablate, benchmark_config, evaluate_params, load_model, train
from corrpm.model import Variant, count_fusion_macs
from corrpm.supervision import LossWeights
from corrpm.synthdata import PART_NAMES, GeneratorConfig, generate_many, read_dataset, write_dataset

EXIT_FAILED_CHECK = 1
EXIT_USAGE = 2
EXIT_ERROR = 3


class UsageError(Exception):
    pass


class CheckFailed(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def int_range(text: str) -> list[int]:
    """``"0..4"`` (inclusive) or ``"0,2,5"``."""
    try:
        if ".." in text:
            lo, hi = (int(t) for t in text.split(".."))
            if hi < lo:
                raise ValueError
            return list(range(lo, hi + 1))
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a range like 0..4 or a list like 0,1,2, got {text!r}") from None


def variant_list(text: str) -> list[Variant]:
    try:
        return [Variant.parse(t.strip()) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _write_json(path, payload) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1, sort_keys=True))


def _table(rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows)


def _load(directory):
    samples = read_dataset(directory)
    if not samples:
        raise ValueError(f"dataset {directory} is empty")
    return samples


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(args) -> dict:
    cfg = GeneratorConfig(canvas=(args.canvas, args.canvas), j=args.j, noise=args.noise)
    samples = generate_many(cfg, range(args.seed, args.seed + args.count))
    write_dataset(samples, args.out, cfg)
    return {"out": str(args.out), "count": len(samples), "seeds": [args.seed, args.seed + args.count - 1]}


def _train_config(args, **extra) -> TrainConfig:
    return benchmark_config(
        base_lr=args.lr,
        batch_size=args.batch_size,
        loss_weights=LossWeights(args.alpha, args.beta),
        feature_width=args.feature_width,
        augment=args.augment,
        **extra,
    )


def cmd_train(args) -> dict:
    data = _load(args.data)
    cfg = _train_config(args, variant=args.variant.value, total_iters=args.iters, seed=args.seed,
                        checkpoint_every=args.checkpoint_every)
    run = train(cfg, data, out_dir=args.out)
    final = run.final_metrics
    return {
        "checkpoint": run.checkpoint,
        "iterations": len(run.losses),
        "initial_loss": run.losses[0]["total"],
        "final_loss": run.losses[-1]["total"],
        "mean_iou": None if final is None else final.mean_iou,
        "wall_seconds": run.wall_seconds,
    }


def cmd_eval(args) -> dict:
    params, model_cfg, cfg = load_model(args.checkpoint)
    data = _load(args.data)
    report = evaluate_params(params, model_cfg, cfg.variant, data)
    payload = {"checkpoint": str(args.checkpoint), "variant": cfg.variant, "samples": len(data), "metrics": report.to_dict()}
    _write_json(args.report, payload)
    rows = [["class", "IoU"]] + [
        [name, "-" if v is None else f"{100 * v:.2f}"] for name, v in zip(PART_NAMES, report.to_dict()["per_class_iou"])
    ]
    rows += [["mIoU", f"{100 * report.mean_iou:.2f}"], ["pixel acc", f"{100 * report.pixel_accuracy:.2f}"],
             ["F-1", f"{100 * report.f1:.2f}"]]
    print(_table(rows))
    return payload


def cmd_ablate(args) -> dict:
    data = _load(args.data)
    cfg = _train_config(args, total_iters=args.iters)
    table = ablate(cfg, args.variants, args.seeds, data, out_dir=args.out)
    print(table.render(PART_NAMES))
    failed = [f"{r['variant']}/{r['seed']}" for r in table.rows if r.get("error")]
    return {"out": str(args.out), "rows": len(table.rows), "failed_cells": failed,
            "median_mean_iou": {v.value: table.median_mean_iou(v) for v in args.variants if table.mean_iou(v)}}


def _summary(report) -> dict:
    worst = report.worst()
    return {
        "passed": report.passed,
        "max_error": report.max_error,
        "tolerance": report.tolerance,
        "worst_parameter": None if worst is None else worst[0],
        "skipped_fraction": report.skipped_fraction,
    }


def cmd_gradcheck(args) -> dict:
    t0 = time.perf_counter()
    results: dict[str, dict] = {}
    modules = ["ops", "encoders", "hnl", "end-to-end"] if args.module == "all" else [args.module]
    eps, tol = args.epsilon, args.tolerance
    if "ops" in modules:
        for op, reports in checks.check_ops(args.shapes, eps, tol).items():
            worst = max(reports, key=lambda r: r.max_error)
            results[f"op:{op}"] = dict(_summary(worst), shapes=len(reports), passed=all(r.passed for r in reports))
    if "encoders" in modules:
        for which in ("parsing", "edge", "pose"):
            results[f"encoder:{which}"] = _summary(checks.check_encoder(which, epsilon=eps, tolerance=tol))
    if "hnl" in modules:
        results["hnl"] = _summary(checks.check_hnl(epsilon=eps, tolerance=tol))
    if "end-to-end" in modules:
        results["end-to-end"] = _summary(checks.check_end_to_end(epsilon=eps, tolerance=args.e2e_tolerance))
    payload = {"epsilon": eps, "results": results, "seconds": time.perf_counter() - t0,
               "passed": all(r["passed"] for r in results.values())}
    if args.report:
        _write_json(args.report, payload)
    rows = [["check", "max rel err", "tol", "ok"]] + [
        [k, f"{r['max_error']:.2e}", f"{r['tolerance']:.0e}", "yes" if r["passed"] else "NO"] for k, r in results.items()
    ]
    print(_table(rows), file=sys.stderr)
    if not payload["passed"]:
        bad = [k for k, r in results.items() if not r["passed"]]
        raise CheckFailed(f"gradient check failed for {', '.join(bad)}")
    return payload


def cmd_bench_fusion(args) -> dict:
    rows = []
    for k in args.factors:
        cost = count_fusion_macs(k, args.channels, args.size, args.size)
        rows.append({"factors": k, **cost._asdict(), "pairs": k * (k - 1) // 2})
    ks = np.array([r["factors"] for r in rows], dtype=float)
    macs = np.array([r["hnl_macs"] for r in rows], dtype=float)
    fit = None
    if len(rows) >= 2:
        slope, intercept = np.polyfit(ks, macs, 1)
        residual = np.abs(macs - (slope * ks + intercept)) / macs
        fit = {"slope": slope, "intercept": intercept, "max_relative_residual": float(residual.max())}
    payload = {"channels": args.channels, "size": [args.size, args.size], "rows": rows, "hnl_affine_fit": fit}
    if args.report:
        _write_json(args.report, payload)
    header = [["k", "HNL corr", "pair corr", "HNL MACs", "pairwise MACs"]]
    print(_table(header + [[str(r["factors"]), str(r["hnl_correlations"]), str(r["pairwise_correlations"]),
                            str(r["hnl_macs"]), str(r["pairwise_macs"])] for r in rows]), file=sys.stderr)
    return payload


# ---------------------------------------------------------------- parser


def _add_training_options(p) -> None:
    p.add_argument("--lr", type=float, default=BENCHMARK_LR, help=f"base learning rate (default {BENCHMARK_LR})")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--alpha", type=float, default=2.0, help="edge loss weight")
    p.add_argument("--beta", type=float, default=70.0, help="pose loss weight")
    p.add_argument("--feature-width", type=int, default=64)
    p.add_argument("--augment", action="store_true", help="random rotation, scale and flip per batch")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="corrpm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--canvas", type=int, default=64)
    p.add_argument("--j", type=int, default=5, help="keypoints per figure")
    p.add_argument("--noise", type=float, default=0.06)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--variant", type=Variant.parse, default=Variant.CORRPM)
    p.add_argument("--iters", type=int, default=250)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint-every", type=int, default=0)
    _add_training_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--report", type=Path, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train every variant for every seed")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--variants", type=variant_list, default=variant_list("p,pb,pk,corrpm"))
    p.add_argument("--seeds", type=int_range, default=int_range("0..4"))
    p.add_argument("--iters", type=int, default=250)
    p.add_argument("--out", type=Path, required=True)
    _add_training_options(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--module", choices=["ops", "encoders", "hnl", "end-to-end", "all"], default="all")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--e2e-tolerance", type=float, default=1e-3)
    p.add_argument("--epsilon", type=float, default=1e-4)
    p.add_argument("--shapes", type=int, default=20, help="random shapes per op")
    p.add_argument("--report", type=Path)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench-fusion", help="count correlation MACs for 1..k factor maps")
    p.add_argument("--factors", type=int_range, default=int_range("1..6"))
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--report", type=Path)
    p.set_defaults(func=cmd_bench_fusion)
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail("UsageError", str(exc), EXIT_USAGE)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        payload = args.func(args)
    except CheckFailed as exc:
        return _fail("CheckFailed", str(exc), EXIT_FAILED_CHECK)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one error line
        return _fail(type(exc).__name__, str(exc), EXIT_ERROR)
    print(json.dumps(payload, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
