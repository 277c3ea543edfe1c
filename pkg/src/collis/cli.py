"""Command-line entry point: data generation, training, evaluation, export, mode comparison."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import metrics
from .config import MODE_ALIASES, RunConfig, build_split, load_config
from .data import ConfigError, read_cloud, write_cloud
from .students import load_checkpoint
from .trainer import evaluate, evaluate_ensemble, export_distillation_set, train

log = logging.getLogger("collis")

EXIT_CONFIG = 2
EXIT_RUNTIME = 1


def worker_count() -> int:
    env = os.environ.get("COLLIS_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"COLLIS_THREADS: not an integer ({env!r})")
    return os.cpu_count() or 1


def _resolve(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig().validate()
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    if getattr(args, "mode", None):
        config.training.mode = MODE_ALIASES[args.mode]
    if getattr(args, "out", None):
        config.output = str(args.out)
    return config


def cmd_gen_data(config: RunConfig, out: Path) -> None:
    scenes, split = build_split(config)
    (out / "train").mkdir(parents=True, exist_ok=True)
    (out / "val").mkdir(parents=True, exist_ok=True)
    for i, c in enumerate(scenes):
        write_cloud(c, out / "train" / f"scene_{i:04d}.pcls")
    for i, c in enumerate(split.validation):
        write_cloud(c, out / "val" / f"scene_{i:04d}.pcls")
    manifest = {
        "seed": config.seed,
        "label_fraction": config.data.label_fraction,
        "labeled": list(split.labeled_index),
        "unlabeled": list(split.unlabeled_index),
        "val_scenes": len(split.validation),
    }
    (out / "split.json").write_text(json.dumps(manifest, indent=1))
    print(f"wrote {len(scenes)} training and {len(split.validation)} validation scenes to {out}")


def cmd_train(config: RunConfig, out: Path | None = None) -> dict:
    out = Path(out or config.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True))
    _, split = build_split(config)
    result = train(config.train_config(), split, out, keep_steps=False)
    rows = []
    names = config.class_map().names
    for e in result.epochs:
        for st, v in e["students"].items():
            if v["val_iou"] is not None:
                rows.append({"epoch": e["epoch"], "student": st, "miou": v["val_miou"],
                             **dict(zip(names, v["val_iou"]))})
    metrics.write_iou_csv(rows, names, out / "val_iou.csv")
    final = result.epochs[-1]
    print(json.dumps({s: v["val_miou"] for s, v in final["students"].items()}))
    return final


def _load_students(config: RunConfig, ckpt_dir: Path, tag: str = "final"):
    students = []
    for spec in config.feature_specs():
        path = ckpt_dir / f"{spec.name}_{tag}.ckpt"
        if not path.exists():
            raise FileNotFoundError(f"missing checkpoint {path}")
        students.append(load_checkpoint(path, spec))
    return students


def cmd_eval(config: RunConfig, ckpt_dir: Path, scenes_dir: Path | None = None) -> dict:
    students = _load_students(config, ckpt_dir)
    if scenes_dir is not None:
        scenes = [read_cloud(p) for p in sorted(Path(scenes_dir).glob("*.pcls"))]
    else:
        scenes = build_split(config)[1].validation
    scenes = [c for c in scenes if c.labels is not None and c.n]
    if not scenes:
        raise ConfigError("no labeled scenes to evaluate")
    result = evaluate(students, scenes)
    names = config.class_map().names
    print(f"{'student':<10}" + "".join(f"{n:>12}" for n in names) + f"{'mIoU':>10}")
    for st, v in result.items():
        print(f"{st:<10}" + "".join(f"{x:>12.4f}" for x in v["iou"]) + f"{v['miou']:>10.4f}")
    ens = evaluate_ensemble(students, scenes) if len(students) > 1 else result[students[0].name]["miou"]
    print(f"{'ensemble':<10}{'':>{12 * len(names)}}{ens:>10.4f}")
    return {"students": result, "ensemble_miou": ens}


def cmd_export_distill(config: RunConfig, ckpt_dir: Path, out: Path) -> list[Path]:
    students = _load_students(config, ckpt_dir)
    _, split = build_split(config)
    written = export_distillation_set(students, split.unlabeled, split.labeled, out)
    print(f"wrote {len(written)} scenes to {out}")
    return written


def _run_job(job):
    config, mode, seed = job
    _, split = build_split(config, seed)
    result = train(config.train_config(mode=mode, seed=seed), split, keep_steps=False)
    return mode, seed, result.epochs


def run_comparison(config: RunConfig, seeds, modes=("supervised_only", "naive_codistill", "collis"),
                   workers: int | None = None) -> dict:
    """Train every (mode, seed) pair and collect the per-epoch summaries.

    Returns {mode: {seed: [epoch summary, ...]}}; results do not depend on `workers`.
    """
    jobs = [(config, m, s) for m in modes for s in seeds]
    workers = workers or worker_count()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            done = list(pool.map(_run_job, jobs))
    else:
        done = [_run_job(j) for j in jobs]
    out: dict = {m: {} for m in modes}
    for mode, seed, epochs in done:
        out[mode][seed] = epochs
    return out


def summarize_comparison(runs: dict) -> dict:
    """Mean final val mIoU per student and mean certainty-of-incorrect trajectory per mode."""
    table = {}
    for mode, by_seed in runs.items():
        seeds = sorted(by_seed)
        names = list(by_seed[seeds[0]][-1]["students"])
        final = {n: float(np.mean([by_seed[s][-1]["students"][n]["val_miou"] for s in seeds])) for n in names}
        traj = []
        for e in range(len(by_seed[seeds[0]])):
            vals = [by_seed[s][e]["students"][n]["certainty_incorrect"] for s in seeds for n in names]
            vals = [v for v in vals if v is not None]
            traj.append(float(np.mean(vals)) if vals else None)
        val_traj = [float(np.mean([by_seed[s][e]["students"][n]["val_miou"] for s in seeds for n in names]))
                    for e in range(len(by_seed[seeds[0]]))]
        table[mode] = {"final_val_miou": final, "certainty_incorrect": traj, "val_miou": val_traj}
    return table


def cmd_compare(config: RunConfig, seeds, out: Path | None = None) -> dict:
    runs = run_comparison(config, seeds)
    table = summarize_comparison(runs)
    names = [s.name for s in config.students]
    print(f"{'mode':<18}" + "".join(f"{n:>10}" for n in names) + f"{'certainty':>12}")
    for mode, row in table.items():
        cert = next((c for c in reversed(row["certainty_incorrect"]) if c is not None), float("nan"))
        print(f"{mode:<18}" + "".join(f"{row['final_val_miou'][n]:>10.4f}" for n in names) + f"{cert:>12.4f}")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "compare.json").write_text(json.dumps({"seeds": list(seeds), "table": table, "runs": runs}))
    return table


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="collis", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=False):
        sp.add_argument("--config", type=Path, help="JSON run configuration")
        sp.add_argument("--seed", type=int, help="override the master seed")
        sp.add_argument("--out", type=Path, required=out_required, help="output directory")
        sp.add_argument("--mode", choices=("collis", "naive", "sup"), help="training mode override")
        sp.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("gen-data", help="write scenes and the split manifest"), out_required=True)
    common(sub.add_parser("train", help="run one training job"))
    sp = sub.add_parser("eval", help="per-student and ensemble mIoU of checkpoints")
    common(sp)
    sp.add_argument("--checkpoints", type=Path, required=True)
    sp.add_argument("--scenes", type=Path, help="directory of labeled .pcls files")
    sp = sub.add_parser("export-distill", help="write an offline-distillation dataset")
    common(sp, out_required=True)
    sp.add_argument("--checkpoints", type=Path, required=True)
    sp = sub.add_parser("compare", help="supervised vs naive co-distillation vs collis")
    common(sp)
    sp.add_argument("--seeds", default=None, help="comma-separated seeds (default: the config seed)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = _resolve(args)
        if args.command == "gen-data":
            cmd_gen_data(config, args.out)
        elif args.command == "train":
            cmd_train(config, args.out)
        elif args.command == "eval":
            cmd_eval(config, args.checkpoints, args.scenes)
        elif args.command == "export-distill":
            cmd_export_distill(config, args.checkpoints, args.out)
        elif args.command == "compare":
            seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [config.seed]
            cmd_compare(config, seeds, args.out)
    except ConfigError as e:
        print(json.dumps({"error": "config", "message": str(e)}), file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, FileNotFoundError, FloatingPointError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
