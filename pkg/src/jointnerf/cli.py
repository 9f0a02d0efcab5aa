"""Command-line entry point: ``jointnerf {gen,train,eval,compare}``.

Exit codes: 0 success, 1 usage error, 2 runtime failure. ``JOINTNERF_LOG``
sets the log level (default WARNING).
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as C
from .dataset import (DatasetError, generate_dataset, load_dataset, quantize, save_dataset,
                      scene_of)
from .geometry import PoseSE3
from .metrics import Trajectory, ate, psnr, rpe, ssim
from .rendering import render_image
from .scenegen import render_ground_truth
from .trainer import TrainingError, load_checkpoint, read_log_csv, run_training

log = logging.getLogger("jointnerf")

REPORT_HEADER = ["metric", "value"]
COMPARE_HEADER = ["run", "strategy", "constraint", "psnr", "ssim", "rpe_t", "rpe_r", "ate",
                  "epochs_to_threshold"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _config_args(p: argparse.ArgumentParser):
    p.add_argument("--config", help="sectioned key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config entry (repeatable)")
    p.add_argument("--seed", type=int, help="seed for scene, prior and training")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="jointnerf", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    _config_args(g)
    g.add_argument("--out", required=True, help="dataset directory")

    t = sub.add_parser("train", help="joint pose and field optimisation")
    _config_args(t)
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--strategy", choices=["uniform", "tdbs", "coarse_to_fine"])
    t.add_argument("--constraint", choices=["gpc", "chamfer", "none"])
    t.add_argument("--ts", type=int, help="epoch at which coarse_to_fine switches to uniform")
    t.add_argument("--epochs", type=int)
    t.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.npz")

    e = sub.add_parser("eval", help="held-out view synthesis and pose accuracy")
    e.add_argument("--checkpoint", help="checkpoint.npz (default: RUN/checkpoint.npz)")
    e.add_argument("--run", help="run directory; the report goes to RUN/report.csv")
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--out", help="report CSV path")
    e.add_argument("--poses", choices=["gt", "neighbor"], help="held-out pose source")
    e.add_argument("--oracle", action="store_true",
                   help="render held-out views from the analytic scene (reference path)")

    c = sub.add_parser("compare", help="side-by-side table of trained runs")
    c.add_argument("runs", nargs="+", help="run directories (each with metrics.csv, report.csv)")
    c.add_argument("--threshold", type=float, help="ATE threshold for epochs-to-threshold")
    c.add_argument("--out", help="CSV output path")
    return p


def _resolve(args) -> C.RunConfig:
    cfg = C.load_config(args.config, C.parse_overrides(args.set))
    if args.seed is not None:
        cfg = replace(cfg, scene=replace(cfg.scene, seed=args.seed),
                      prior=replace(cfg.prior, rng_seed=args.seed),
                      train=replace(cfg.train, seed=args.seed))
    return cfg


# ---------------------------------------------------------------- commands

def cmd_gen(args) -> int:
    cfg = _resolve(args)
    out = Path(args.out)
    C.write_config(cfg, out / "config.ini")
    ds = generate_dataset(cfg.scene, cfg.prior)
    save_dataset(ds, out)
    print(f"wrote {ds.n_frames} frames to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args)
    tr = cfg.train
    samp = tr.sampling
    if args.strategy:
        samp = replace(samp, strategy=args.strategy)
    if args.ts is not None:
        samp = replace(samp, T_s=args.ts)
    tr = replace(tr, sampling=samp)
    if args.constraint:
        tr = replace(tr, constraint=args.constraint)
    if args.epochs is not None:
        tr = replace(tr, epochs=args.epochs)
    cfg = replace(cfg, train=tr)
    out = Path(args.out)
    C.write_config(cfg, out / "config.ini")
    ds = load_dataset(args.data)
    resume = out / "checkpoint.npz" if args.resume else None
    if resume is not None and not resume.exists():
        raise UsageError(f"--resume given but {resume} does not exist")

    def progress(rec):
        if rec["epoch"] % 100 == 0:
            log.info("epoch %d total %.5f ate %.5f %s", rec["epoch"], rec["total"],
                     rec["ate"], rec["strategy"])

    run_training(tr, ds, out, resume_from=resume, progress=progress)
    print(f"trained {tr.epochs} epochs; log in {out / 'metrics.csv'}")
    return 0


def holdout_poses(ds, est_poses, mode: str) -> dict[int, PoseSE3]:
    """Poses for held-out frames: ground truth, or the nearest optimised
    training pose composed with the true relative motion."""
    out = {}
    for h in ds.holdout_ids:
        if mode == "gt":
            out[h] = ds.gt_poses[h]
            continue
        j = min(ds.train_ids, key=lambda i: (abs(i - h), i))
        rel = ds.gt_poses[j].inverse().compose(ds.gt_poses[h])
        out[h] = est_poses[j].compose(rel)
    return out


def evaluate(ds, st, cfg: C.RunConfig, mode: str, oracle: bool = False) -> list[tuple[str, float]]:
    rows = []
    ids = list(ds.train_ids)
    psnrs, ssims = [], []
    est_all = st.poses if st is not None else ds.gt_poses
    for h, pose in holdout_poses(ds, est_all, mode).items():
        if oracle:
            n = ds.meta.get("scene_config", {}).get("gt_samples", cfg.scene.gt_samples)
            rgb, _ = render_ground_truth(scene_of(ds), ds.K, pose, n)
            rgb = quantize(rgb)
        else:
            rgb, _, _ = render_image(st.field, ds.K, pose, cfg.train.sampling,
                                     strategy="uniform", rng=np.random.default_rng(0))
        psnrs.append(psnr(rgb, ds.images[h]))
        ssims.append(ssim(rgb, ds.images[h]))
        rows.append((f"psnr_frame_{h}", psnrs[-1]))
    rows.insert(0, ("psnr", float(np.mean(psnrs)) if psnrs else float("nan")))
    rows.insert(1, ("ssim", float(np.mean(ssims)) if ssims else float("nan")))
    est = Trajectory(ids, [est_all[i] for i in ids])
    ref = Trajectory(ids, [ds.gt_poses[i] for i in ids])
    a_se3, a_sim3 = ate(est, ref), ate(est, ref, with_scale=True)
    rt, rr = rpe(est, ref, cfg.metrics.rpe_delta)
    rows[2:2] = [("ate", a_sim3 if cfg.metrics.alignment == "sim3" else a_se3),
                 ("ate_se3", a_se3), ("ate_sim3", a_sim3), ("rpe_t", rt), ("rpe_r", rr)]
    return rows


def _report_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for k, v in rows:
        w.writerow([k, repr(float(v))])
    return buf.getvalue()


def cmd_eval(args) -> int:
    if args.checkpoint is None and args.run is None:
        raise UsageError("eval needs --checkpoint or --run")
    run = Path(args.run) if args.run else Path(args.checkpoint).parent
    ckpt = Path(args.checkpoint) if args.checkpoint else run / "checkpoint.npz"
    if not ckpt.exists():
        raise FileNotFoundError(f"missing checkpoint {ckpt}")
    ds = load_dataset(args.data)
    st, tcfg, _ = load_checkpoint(ckpt)
    cfg_path = run / "config.ini"
    cfg = C.load_config(cfg_path) if cfg_path.exists() else C.RunConfig()
    cfg = replace(cfg, train=tcfg)
    mode = args.poses or cfg.metrics.holdout_poses
    rows = evaluate(ds, st, cfg, mode, args.oracle)
    out = Path(args.out) if args.out else run / "report.csv"
    out.write_text(_report_csv(rows))
    summary = {k: v for k, v in rows}
    print(f"psnr {summary['psnr']:.3f} dB  ssim {summary['ssim']:.4f}  ate {summary['ate']:.5f}  "
          f"rpe_t {summary['rpe_t']:.5f}  rpe_r {summary['rpe_r']:.4f} deg  -> {out}")
    return 0


def epochs_to_threshold(rows: list[dict], threshold: float):
    """First logged epoch whose ATE is at or below ``threshold`` (None if never)."""
    for r in rows:
        if not math.isnan(r["ate"]) and r["ate"] <= threshold:
            return r["epoch"]
    return None


def _read_report(path: Path) -> dict[str, float]:
    with open(path, newline="") as fh:
        return {r["metric"]: float(r["value"]) for r in csv.DictReader(fh)}


def compare_rows(runs, threshold: float | None = None) -> list[dict]:
    rows = []
    for r in runs:
        r = Path(r)
        for name in ("metrics.csv", "report.csv", "config.ini"):
            if not (r / name).exists():
                raise FileNotFoundError(f"{r}: missing {name}")
        cfg = C.load_config(r / "config.ini")
        log_rows = read_log_csv(r / "metrics.csv")
        rep = _read_report(r / "report.csv")
        thr = cfg.metrics.ate_threshold if threshold is None else threshold
        ett = epochs_to_threshold(log_rows, thr)
        rows.append({"run": r.name, "strategy": cfg.train.sampling.strategy,
                     "constraint": cfg.train.constraint, "psnr": rep["psnr"], "ssim": rep["ssim"],
                     "rpe_t": rep["rpe_t"], "rpe_r": rep["rpe_r"], "ate": rep["ate"],
                     "epochs_to_threshold": "" if ett is None else ett})
    rows.sort(key=lambda d: (d["ate"], d["run"]))
    return rows


def _cell(v) -> str:
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def cmd_compare(args) -> int:
    if len(args.runs) < 2:
        raise UsageError("compare needs at least two run directories")
    rows = compare_rows(args.runs, args.threshold)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COMPARE_HEADER)
    for r in rows:
        w.writerow([r[k] if not isinstance(r[k], float) else repr(r[k]) for k in COMPARE_HEADER])
    if args.out:
        Path(args.out).write_text(buf.getvalue())
    table = [COMPARE_HEADER] + [[_cell(r[k]) for k in COMPARE_HEADER] for r in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(COMPARE_HEADER))]
    for row in table:
        print("  ".join(c.ljust(wd) for c, wd in zip(row, widths)).rstrip())
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "compare": cmd_compare}


def main(argv=None) -> int:
    level = os.environ.get("JOINTNERF_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.cmd](args)
    except UsageError as e:
        print(f"jointnerf: error: {e}", file=sys.stderr)
        return 1
    except C.ConfigError as e:
        print(f"jointnerf: config error: {e}", file=sys.stderr)
        return 1
    except (TrainingError, DatasetError, FileNotFoundError, OSError, ValueError) as e:
        print(f"jointnerf: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
