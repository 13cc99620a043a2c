"""Command-line entry point: ``poiloc <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import dataset as dsio
from .config import ExperimentConfig, load_config
from .errors import ConfigError, DataError, PoiLocError
from .experiment import add_renders, build_dataset, run_c2f, run_mode
from .geometry import write_poses
from .pipeline import TrainMode, evaluate, filter_quality, oracle_head
from .regressor import load_checkpoint, save_checkpoint

log = logging.getLogger("poiloc")


def _config_for(args, stored: dict | None = None) -> ExperimentConfig:
    """Stored dataset config, then ``--config``, then ``--set``, then ``--seed``."""
    if args.config:
        cfg = load_config(args.config, args.set)
    elif stored is not None:
        from .config import apply_overrides
        cfg = apply_overrides(ExperimentConfig.from_dict(stored), args.set or []).validate()
    else:
        cfg = load_config(None, args.set)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg.validate()


def cmd_scene_gen(args) -> int:
    cfg = _config_for(args)
    out = Path(args.out or cfg.out)
    ds = build_dataset(cfg)
    dsio.save_dataset(out, ds)
    log.info("wrote %d frames to %s", len(ds.frames), out)
    return 0


def cmd_render(args) -> int:
    src = dsio.load_dataset(args.dataset)
    cfg = _config_for(args, src.config)
    ds = add_renders(src, cfg)
    ds.config = cfg.to_dict()
    dsio.save_dataset(args.out or args.dataset, ds)
    log.info("rendered %d frames", len(ds.rendered_frames))
    return 0


def _write_training_outputs(out: Path, result, heads, cfg: ExperimentConfig, mode: str,
                            ds: dsio.Dataset) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    for i, head in enumerate(heads):
        save_checkpoint(out / f"head_{i}.ckpt", head, result.opt if i == 0 else None,
                        meta={"mode": mode, "seed": cfg.seed})
    with open(out / "train.log", "w") as fh:
        for r in result.log:
            fh.write(f"{r.iteration} {r.mean_loss:.9g} {r.active_rendered} {r.omega:.9g}\n")
    with open(out / "active.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "active_rendered"])
        for r in result.log:
            w.writerow([r.iteration, r.active_rendered])
    meta = {"mode": mode, "seed": cfg.seed, "n_heads": len(heads)}
    if result.ledger is not None:
        result.ledger.dump(out / "ledger.txt")
        if ds.oracle:
            q = filter_quality(result.ledger, ds.oracle)
            meta.update(filter_precision=q.precision, filter_recall=q.recall,
                        filter_precision_defined=q.precision_defined)
    (out / "config.json").write_text(cfg.to_json() + "\n")
    (out / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    # kept apart so every other output is byte-reproducible
    (out / "timing.json").write_text(json.dumps({"wall_time_s": round(result.wall_time, 3)}) + "\n")
    return meta


def cmd_train(args) -> int:
    ds = dsio.load_dataset(args.dataset, with_oracle=True)
    cfg = _config_for(args, ds.config)
    mode = TrainMode(args.mode)
    run = run_mode(cfg, ds, mode)
    out = Path(args.out or cfg.out)
    _write_training_outputs(out, run.result, run.heads, cfg, mode.value, ds)
    _write_eval(out, run.summary)
    return 0


def cmd_train_c2f(args) -> int:
    ds = dsio.load_dataset(args.dataset, with_oracle=True)
    cfg = _config_for(args, ds.config)
    run = run_c2f(cfg, ds, coarse_only=args.coarse_only)
    out = Path(args.out or cfg.out)
    _write_training_outputs(out, run.result, run.heads, cfg,
                            "coarse" if args.coarse_only else "c2f", ds)
    _write_eval(out, run.summary)
    return 0


def _write_eval(out: Path, summary) -> None:
    out.mkdir(parents=True, exist_ok=True)
    dsio.write_summary(out / "summary.kv", summary.as_dict())
    ok = [f for f in summary.frames if f.pose is not None]
    write_poses(out / "estimated_poses.txt", [f.pose for f in ok])
    with open(out / "errors.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame_id", "t_err_m", "r_err_deg", "inlier_ratio", "model", "failure"])
        for f in summary.frames:
            w.writerow([f.frame_id, f"{f.t_err:.9g}", f"{f.r_err:.9g}", f"{f.inlier_ratio:.9g}",
                        f.model, f.failure or ""])
    s = summary.as_dict()
    lines = [f"{k}: {s[k]}" for k in sorted(s)]
    (out / "report.txt").write_text("\n".join(lines) + "\n")


def cmd_eval(args) -> int:
    ds = dsio.load_dataset(args.dataset)
    if args.oracle:
        heads = [oracle_head]
        out = Path(args.out or "oracle_eval")
    else:
        path = Path(args.checkpoint)
        files = sorted(path.glob("head_*.ckpt")) if path.is_dir() else [path]
        if not files:
            raise DataError(f"no checkpoint found at {path}")
        heads = [load_checkpoint(f)[0] for f in files]
        out = Path(args.out or (path if path.is_dir() else path.parent))
    cfg = _config_for(args, ds.config)
    summary = evaluate(heads, ds.test_frames, cfg.ransac.config(cfg.seed))
    _write_eval(out, summary)
    print((out / "report.txt").read_text(), end="")
    return 0


REPORT_COLUMNS = ["run", "mode", "median_t_m", "median_r_deg", "acc_5cm_5deg", "acc_10cm_5deg",
                  "filter_precision", "filter_recall", "wall_time_s"]


def report_rows(run_dirs) -> list[dict]:
    rows = []
    for d in run_dirs:
        d = Path(d)
        try:
            meta = json.loads((d / "run.json").read_text()) if (d / "run.json").exists() else {}
            if (d / "timing.json").exists():
                meta.update(json.loads((d / "timing.json").read_text()))
            summ = dsio.read_summary(d / "summary.kv")
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"run directory {d} is incomplete: {exc}") from exc
        row = {"run": d.name, "mode": meta.get("mode", "?")}
        row.update({k: summ.get(k, "") for k in REPORT_COLUMNS[2:6]})
        row.update({k: meta.get(k, "") for k in REPORT_COLUMNS[6:]})
        rows.append(row)
    return rows


def format_table(rows: list[dict]) -> str:
    def cell(v):
        return f"{v:.4g}" if isinstance(v, float) else str(v)
    table = [REPORT_COLUMNS] + [[cell(r[c]) for c in REPORT_COLUMNS] for r in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(REPORT_COLUMNS))]
    return "\n".join("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in table) + "\n"


def cmd_report(args) -> int:
    rows = report_rows(args.runs)
    text = format_table(rows)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "report.txt").write_text(text)
        with open(Path(args.out) / "report.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
            w.writeheader()
            w.writerows(rows)
    print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value; repeatable")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="poiloc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("scene-gen", parents=[common], help="generate a dataset").set_defaults(func=cmd_scene_gen)
    r = sub.add_parser("render", parents=[common], help="append rendered frames to a dataset")
    r.add_argument("dataset")
    r.set_defaults(func=cmd_render)
    t = sub.add_parser("train", parents=[common], help="train and evaluate one mode")
    t.add_argument("dataset")
    t.add_argument("--mode", choices=[m.value for m in TrainMode], default="poi")
    t.set_defaults(func=cmd_train)
    c = sub.add_parser("train-c2f", parents=[common], help="coarse-to-fine training")
    c.add_argument("dataset")
    c.add_argument("--coarse-only", action="store_true", help="stop after the coarse stage")
    c.set_defaults(func=cmd_train_c2f)
    e = sub.add_parser("eval", parents=[common], help="evaluate checkpoints on the test frames")
    e.add_argument("paths", nargs="+", metavar="[CHECKPOINT] DATASET",
                   help="checkpoint file or run directory, then the dataset")
    e.add_argument("--oracle", action="store_true", help="use ground-truth scene coordinates")
    e.set_defaults(func=cmd_eval)
    rp = sub.add_parser("report", parents=[common], help="compare run directories")
    rp.add_argument("runs", nargs="+")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "eval":
        want = 1 if args.oracle else 2
        if len(args.paths) != want:
            print("error: eval takes CHECKPOINT DATASET, or DATASET with --oracle", file=sys.stderr)
            return ConfigError.exit_code
        args.checkpoint, args.dataset = ([None] + args.paths)[-2:]
    t0 = time.perf_counter()
    try:
        code = args.func(args)
    except PoiLocError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
