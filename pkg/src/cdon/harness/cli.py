"""Command line: data generation, training, evaluation, ablations, checks.

Exit codes: 0 success, 2 configuration or file-format error, 3 numeric
failure.  CDON_THREADS caps the per-image worker count where work is
parallel (inference).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from ..errors import CdonError, ConfigError, FormatError, NumericError
from ..evaluation import EvalCurve, save_detections, write_curve_csv

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("CDON_THREADS", "1")))
    except ValueError:
        return 1


def cmd_gen_data(args) -> int:
    from .config import load_config
    from .scenes import write_dataset

    scene_cfg, _train_cfg = load_config(args.config)
    ids = write_dataset(scene_cfg, args.out, args.count)
    print(f"wrote {len(ids)} scenes to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .config import load_config
    from .scenes import load_dataset
    from .training import train, write_training_log

    scene_cfg, cfg = load_config(args.config)
    dataset = load_dataset(args.data)
    log_path = args.log or (str(Path(args.out).with_suffix(".log.csv")))
    ckpt, rows, meta = train(cfg, dataset, scene_cfg=scene_cfg,
                             log_path=log_path,
                             checkpoint_dir=str(Path(args.out).parent))
    save_checkpoint(ckpt, args.out)
    write_training_log(log_path, rows)
    print(f"trained {cfg.total_steps} steps in {meta['wall_time_s']:.1f}s; "
          f"checkpoint at {args.out}, log at {log_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .config import load_config
    from .scenes import load_dataset
    from .training import restore_network, run_inference, score_detections

    scene_cfg, cfg = load_config(args.config)
    ckpt = load_checkpoint(args.ckpt)
    from .config import config_hash

    want = config_hash(scene_cfg, cfg)
    if ckpt.config_hash and ckpt.config_hash != want:
        raise ConfigError(
            f"checkpoint was trained under config {ckpt.config_hash[:12]}, "
            f"current config hashes to {want[:12]}")
    dataset = load_dataset(args.data)
    net = restore_network(ckpt, cfg)
    per_image = run_inference(net, dataset, workers=_workers())
    if args.dets:
        save_detections(args.dets,
                        [d for _id, dets, _a in per_image for d in dets])
    report = score_detections(per_image, [args.subset])
    result = report[args.subset]
    if isinstance(result, EvalCurve):
        write_curve_csv(args.out, result, args.subset)
        print(f"{args.subset}: MR-2 = {result.mr2:.2f}%  "
              f"({len(result.points)} curve points) -> {args.out}")
    else:
        print(f"{args.subset}: {result}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablation import ablate, format_table
    from .config import load_config

    scene_cfg, cfg = load_config(args.config)
    rows = ablate(cfg, args.axis, scene_cfg)
    table = format_table(rows)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / f"ablation_{args.axis}.txt"
    out_path.write_text(table + "\n")
    print(table)
    print(f"table written to {out_path}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .gradsuite import run_grad_suite

    reports = run_grad_suite(args.op)
    worst = 0.0
    failed = []
    for name, rep in sorted(reports.items()):
        status = "ok" if rep.passed else "FAIL"
        print(f"{name:28s} max_rel_err={rep.max_rel_err:.3e}  {status}")
        worst = max(worst, rep.max_rel_err)
        if not rep.passed:
            failed.append(name)
    print(f"worst relative error: {worst:.3e}")
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 5))
    for path in args.curves:
        xs, ys = [], []
        label = Path(path).stem
        with open(path, encoding="utf-8") as f:
            header = f.readline()
            if not header.startswith("fppi"):
                raise FormatError(f"{path}: not a curve CSV")
            for line in f:
                line = line.strip()
                if not line or line.startswith("#"):
                    if line.startswith("# subset="):
                        label = line[2:]
                    continue
                fppi, mr = line.split(",")
                xs.append(max(float(fppi), 1e-4))
                ys.append(max(float(mr), 1e-4))
        ax.plot(xs, ys, marker="o", label=label)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("false positives per image")
    ax.set_ylabel("miss rate")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=8)
    fig.savefig(args.out, format="svg", bbox_inches="tight")
    print(f"plot written to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="cdon",
        description="Coupled pedestrian detector: desk-scale training, "
                    "evaluation and ablations on synthetic scenes.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate synthetic scenes")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train the coupled detector")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="training log CSV path")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--config", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--subset", required=True)
    e.add_argument("--out", required=True, help="curve CSV path")
    e.add_argument("--dets", help="optional detections JSONL dump")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="run an ablation axis")
    a.add_argument("--axis", required=True,
                   choices=["squeeze_ratio", "gate_kind", "deformable"])
    a.add_argument("--config", required=True)
    a.add_argument("--out", required=True, help="output directory")
    a.set_defaults(fn=cmd_ablate)

    c = sub.add_parser("grad-check", help="run the gradient suite")
    c.add_argument("--op", help="check a single operator")
    c.set_defaults(fn=cmd_grad_check)

    pl = sub.add_parser("plot", help="plot miss-rate curves to SVG")
    pl.add_argument("--curves", nargs="+", required=True)
    pl.add_argument("--out", required=True)
    pl.set_defaults(fn=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CdonError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
