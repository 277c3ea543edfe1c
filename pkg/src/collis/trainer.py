"""Collaborative training loop, baselines, evaluation, ensembling and distillation export.

One iteration pairs one labeled scene with one unlabeled scene, optionally
mixes them, runs every student on the result, derives reliability-gated
pseudo-labels between every ordered pair of students, and updates each
student on its labeled, regularization and unlabeled losses.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import losses, metrics
from .cda import CdaController, consensus_fraction
from .data import ORIGIN_A, ORIGIN_B, DatasetSplit, PointCloud, write_cloud
from .metrics import certainty_of_incorrect  # noqa: F401  (re-exported)
from .mixing import maybe_mix
from .reliability import absolute_reliability, filter_pseudo_labels, reliability_state
from .seeding import child_seed, stream
from .students import (
    FeatureSpec,
    NonFiniteError,
    StudentModel,
    backward,
    forward_features,
    point_features,
    predict,
    save_checkpoint,
    step,
)

log = logging.getLogger(__name__)

MODES = ("collis", "naive_codistill", "supervised_only")


@dataclass
class CdaSettings:
    mode: str = "consensus"
    q_init: float = 0.2
    step_size: int = 50
    q_min: float = 0.15
    q_max: float = 0.25


@dataclass
class TrainConfig:
    students: list[FeatureSpec]
    epochs: int = 60
    label_fraction: float = 0.1
    lambda0: float = 0.5
    delta0: float = 0.95
    lambda_reg: float = 0.1
    lr: float = 0.05
    hidden: int = 32
    seed: int = 0
    mode: str = "collis"
    cda: CdaSettings = field(default_factory=CdaSettings)
    # Reduction-identity hooks; both default off.
    force_delta: float | None = None
    supervised_reg_unlabeled: bool = False
    log_window: int = 50

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown training mode {self.mode!r}")
        if not self.students:
            raise ValueError("the student roster is empty")
        if self.mode == "naive_codistill" and len(self.students) < 2:
            raise ValueError("naive co-distillation needs at least two students")
        names = [s.name for s in self.students]
        if len(set(names)) != len(names):
            raise ValueError("student names must be unique")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


def label_budget_defaults(label_fraction: float) -> dict:
    """Unlabeled-loss weight and initial mixing probability for a label budget.

    lambda0 is 1 / 0.5 / 0.5 / 0.3 at 1 / 10 / 20 / 50 % labels; q_m starts at
    0.25 for 1 %, 0.15 from 20 % on, and 0.2 in between.
    """
    if label_fraction <= 0.01:
        return {"lambda0": 1.0, "q_init": 0.25}
    if label_fraction < 0.2:
        return {"lambda0": 0.5, "q_init": 0.2}
    if label_fraction <= 0.2:
        return {"lambda0": 0.5, "q_init": 0.15}
    return {"lambda0": 0.3, "q_init": 0.15}


@dataclass
class TrainState:
    config: TrainConfig
    split: DatasetSplit
    students: list[StudentModel]
    controller: CdaController
    mix_rng: np.random.Generator
    select_rng: np.random.Generator
    iteration: int = 0
    beta: float = 0.0
    lambda_u: float = 0.0
    # (student, 'L' | 'U', scene index) -> (features, in-bounds); scenes are immutable
    feature_cache: dict = field(default_factory=dict)


def init_state(config: TrainConfig, split: DatasetSplit) -> TrainState:
    k = _num_classes(split)
    students = [
        StudentModel.init(spec, k, config.hidden, seed=child_seed(config.seed, "init", spec.name))
        for spec in config.students
    ]
    # a lone student has no peers, so nothing is ever mixed and q_m stays 0
    collaborative = config.mode != "supervised_only" and len(students) >= 2
    cda_mode = config.cda.mode if config.mode == "collis" and collaborative else "constant"
    q0 = config.cda.q_init if collaborative else 0.0
    controller = CdaController(cda_mode, q0, config.cda.step_size, config.cda.q_min, config.cda.q_max)
    return TrainState(
        config, split, students, controller,
        mix_rng=stream(config.seed, "mixing"),
        select_rng=stream(config.seed, "selector"),
    )


def _num_classes(split: DatasetSplit) -> int:
    for c in [*split.labeled, *split.validation]:
        if c.num_classes is not None:
            return c.num_classes
    raise ValueError("cannot infer the number of classes from the split")


def _unlabeled_branch(state: TrainState) -> bool:
    cfg = state.config
    if not state.split.unlabeled:
        return False
    if cfg.mode == "supervised_only":
        return cfg.supervised_reg_unlabeled
    return len(state.students) >= 2


def _scene_order(state: TrainState) -> list[tuple[int, int | None]]:
    n_lab, n_unl = len(state.split.labeled), len(state.split.unlabeled)
    n_iter = n_unl if n_unl else n_lab
    unl = state.select_rng.permutation(n_unl) if n_unl else [None] * n_iter
    reps = math.ceil(n_iter / n_lab)
    lab = np.concatenate([state.select_rng.permutation(n_lab) for _ in range(reps)])[:n_iter]
    return [(int(a), None if b is None else int(b)) for a, b in zip(lab, unl)]


def _mean_or_none(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def train_step(state: TrainState, lab_idx: int, unl_idx: int | None, epoch: int) -> dict:
    cfg = state.config
    split = state.split
    students = state.students
    s = len(students)
    labeled = split.labeled[lab_idx]
    branch = _unlabeled_branch(state) and unl_idx is not None
    unlabeled = split.unlabeled[unl_idx] if branch else None
    q_used = state.controller.q_m

    if cfg.mode == "supervised_only" or unlabeled is None:
        parts = [(labeled, np.full(labeled.n, ORIGIN_A, np.uint8), np.arange(labeled.n))]
        if unlabeled is not None:
            parts.append((unlabeled, np.full(unlabeled.n, ORIGIN_B, np.uint8), np.arange(unlabeled.n)))
        was_mixed, strategy = False, "none"
    else:
        mix = maybe_mix(labeled, unlabeled, q_used, state.mix_rng)
        parts = mix.parts()
        was_mixed, strategy = mix.was_mixed, mix.strategy.value

    clouds = [p[0] for p in parts]
    keys = [None] * len(parts) if was_mixed else [("L", lab_idx), ("U", unl_idx)][: len(parts)]
    origin = np.concatenate([p[1] for p in parts])
    src = np.concatenate([p[2] for p in parts])
    lab_mask = origin == ORIGIN_A
    unl_mask = origin == ORIGIN_B
    targets = np.zeros(len(origin), np.int64)
    targets[lab_mask] = labeled.labels[src[lab_mask]]
    truth = None
    if unl_mask.any():
        truth = metrics.sealed_truth(split, unl_idx)[src[unl_mask]]

    outs = [_forward_cached(state, st, clouds, keys) for st in students]

    collaborative = cfg.mode != "supervised_only" and s >= 2 and unl_mask.any()
    reg_weight = 0.0 if cfg.mode == "naive_codistill" else cfg.lambda_reg

    consensus = consensus_fraction([o.predictions for o in outs]) if s >= 2 else None

    rel = None
    pseudo = {}
    if collaborative:
        common = unl_mask.copy()
        for o in outs:
            common &= o.in_bounds
        lambda_u = cfg.lambda0 if cfg.mode == "naive_codistill" else state.lambda_u
        rel = reliability_state(
            np.stack([o.confidence[common] for o in outs]),
            state.beta, lambda_u, cfg.delta0,
            naive=cfg.mode == "naive_codistill", force_delta=cfg.force_delta,
        )
        for t in range(s):
            for i in range(s):
                if i != t:
                    eligible = unl_mask & outs[i].in_bounds & outs[t].in_bounds
                    labels, kept = filter_pseudo_labels(outs[i], rel.delta[(i, t)], eligible)
                    pseudo[(i, t)] = (labels, kept, eligible)

    record_students = {}
    grads = []
    for t, (st, out) in enumerate(zip(students, outs)):
        probs = out.probabilities
        l_lab = losses.labeled_loss(probs, targets, lab_mask & out.in_bounds)
        l_reg = losses.regularization_loss(probs, out.in_bounds, reg_weight)
        total_value = l_lab.value + l_reg.value
        total_grad = l_lab.grad + l_reg.grad
        l_u_value = 0.0
        if collaborative:
            sources = [i for i in range(s) if i != t]
            l_u = losses.unlabeled_loss(
                probs,
                [(pseudo[(i, t)][0], pseudo[(i, t)][1]) for i in sources],
                [rel.omega[(i, t)] for i in sources],
                rel.lambda_u,
            )
            l_u_value = l_u.value
            total_value = total_value + l_u.value
            total_grad = total_grad + l_u.grad
        if not (math.isfinite(total_value) and np.all(np.isfinite(total_grad))):
            raise NonFiniteError(f"non-finite loss for {st.name} at iteration {state.iteration}")
        grads.append(total_grad)

        entry = {"l_lab": l_lab.value, "l_reg": l_reg.value, "l_u": l_u_value, "total": total_value}
        entry.update(_source_diagnostics(t, s, out, pseudo, truth, unl_mask, collaborative))
        record_students[st.name] = entry

    for st, out, g in zip(students, outs, grads):
        step(st, backward(st, out, g), cfg.lr)

    if consensus is not None and collaborative:
        state.controller.observe(consensus, was_mixed)

    record = {
        "type": "step",
        "epoch": epoch,
        "iteration": state.iteration,
        "labeled_scene": lab_idx,
        "unlabeled_scene": unl_idx if branch else None,
        "q_m": q_used,
        "strategy": strategy,
        "consensus": consensus,
        "students": record_students,
    }
    if rel is not None:
        record["reliability"] = rel.snapshot()
    state.iteration += 1
    return record


def _forward_cached(state: TrainState, student: StudentModel, clouds, keys):
    feats, inb = [], []
    for cloud, key in zip(clouds, keys):
        hit = state.feature_cache.get((student.name, *key)) if key else None
        if hit is None:
            x, mapping = point_features(cloud, student.spec)
            hit = (x, mapping.in_bounds)
            if key:
                state.feature_cache[(student.name, *key)] = hit
        feats.append(hit[0])
        inb.append(hit[1])
    x = feats[0] if len(feats) == 1 else np.vstack(feats)
    in_bounds = inb[0] if len(inb) == 1 else np.concatenate(inb)
    return forward_features(student, x, in_bounds)


def _source_diagnostics(i, s, out, pseudo, truth, unl_mask, collaborative) -> dict:
    """Retention/accuracy of student i's outgoing pseudo-labels and certainty of its mistakes."""
    d = {"retention": None, "pl_accuracy": None, "certainty_incorrect": None, "n_incorrect": 0}
    if truth is None:
        return d
    if collaborative:
        full_truth = _expand(truth, unl_mask)
        rates, kept_all, labels_all, truth_all = [], [], [], []
        for t in range(s):
            if t == i:
                continue
            labels, kept, eligible = pseudo[(i, t)]
            rates.append(metrics.retention_and_accuracy(kept, labels, full_truth, eligible)[0])
            kept_all.append(kept)
            labels_all.append(labels)
            truth_all.append(full_truth)
        d["retention"] = float(np.mean(rates))
        d["pl_accuracy"] = metrics.retention_and_accuracy(
            np.concatenate(kept_all), np.concatenate(labels_all), np.concatenate(truth_all)
        )[1]
    probs_u = out.probabilities[unl_mask]
    pred_u = out.predictions[unl_mask]
    d["certainty_incorrect"] = metrics.certainty_of_incorrect(probs_u, pred_u, truth)
    d["n_incorrect"] = int(np.count_nonzero(pred_u != truth))
    return d


def _expand(truth, unl_mask):
    full = np.full(len(unl_mask), -1, np.int64)
    full[unl_mask] = truth
    return full


def run_epoch(state: TrainState, epoch: int) -> list[dict]:
    cfg = state.config
    state.beta, state.lambda_u = absolute_reliability(epoch, cfg.epochs, cfg.lambda0)
    state.controller.start_epoch(epoch, cfg.epochs)
    return [train_step(state, a, b, epoch) for a, b in _scene_order(state)]


def evaluate(students: list[StudentModel], scenes: list[PointCloud]) -> dict[str, dict]:
    """Per-student per-class IoU and mIoU over `scenes` (classes absent from truth excluded)."""
    out = {}
    for st in students:
        cm = metrics.ConfusionMatrix(st.num_classes)
        for c in scenes:
            cm.accumulate(c.labels, predict(st, c).predictions)
        iou, miou = metrics.iou_from_matrix(cm)
        out[st.name] = {"iou": iou.tolist(), "miou": miou}
    return out


def ensemble_predict(students: list[StudentModel], cloud: PointCloud) -> np.ndarray:
    """Per point, the prediction of the most confident student (lowest index on ties)."""
    outs = [predict(st, cloud) for st in students]
    return ensemble_from_outputs(outs)


def ensemble_from_outputs(outs) -> np.ndarray:
    conf = np.stack([o.confidence for o in outs])
    preds = np.stack([o.predictions for o in outs])
    best = np.argmax(conf, axis=0)
    return preds[best, np.arange(conf.shape[1])]


def evaluate_ensemble(students, scenes) -> float:
    cm = metrics.ConfusionMatrix(students[0].num_classes)
    for c in scenes:
        cm.accumulate(c.labels, ensemble_predict(students, c))
    return metrics.iou_from_matrix(cm)[1]


def _epoch_summary(state: TrainState, epoch: int, records: list[dict]) -> dict:
    summary = {
        "type": "epoch",
        "epoch": epoch,
        "q_m": state.controller.q_m,
        "beta": state.beta,
        "lambda_u": state.lambda_u,
        "students": {},
    }
    val = evaluate(state.students, state.split.validation) if state.split.validation else {}
    for st in state.students:
        rows = [r["students"][st.name] for r in records]
        n_wrong = sum(r["n_incorrect"] for r in rows if r["certainty_incorrect"] is not None)
        cert = None
        if n_wrong:
            cert = sum(r["certainty_incorrect"] * r["n_incorrect"]
                       for r in rows if r["certainty_incorrect"] is not None) / n_wrong
        summary["students"][st.name] = {
            "val_miou": val.get(st.name, {}).get("miou"),
            "val_iou": val.get(st.name, {}).get("iou"),
            "loss": float(np.mean([r["total"] for r in rows])) if rows else None,
            "retention": _mean_or_none(r["retention"] for r in rows),
            "pl_accuracy": _mean_or_none(r["pl_accuracy"] for r in rows),
            "certainty_incorrect": cert,
        }
    if state.split.validation and len(state.students) > 1:
        summary["ensemble_val_miou"] = evaluate_ensemble(state.students, state.split.validation)
    return summary


@dataclass
class TrainResult:
    students: list[StudentModel]
    steps: list[dict]
    epochs: list[dict]


def _dump(record: dict) -> str:
    return json.dumps(record, allow_nan=False, separators=(",", ":"))


def train(config: TrainConfig, split: DatasetSplit, out_dir: str | Path | None = None,
          keep_steps: bool = True) -> TrainResult:
    """Run all epochs; optionally write metrics.jsonl and per-epoch checkpoints to `out_dir`."""
    state = init_state(config, split)
    steps, epochs = [], []
    fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        fh = open(out_dir / "metrics.jsonl", "w")
    try:
        for epoch in range(config.epochs):
            try:
                records = run_epoch(state, epoch)
            except (NonFiniteError, FloatingPointError) as e:
                if out_dir is not None:
                    (out_dir / "failed_step.json").write_text(json.dumps({
                        "epoch": epoch, "iteration": state.iteration, "error": str(e),
                        "seed": config.seed, "mode": config.mode,
                    }))
                raise
            summary = _epoch_summary(state, epoch, records)
            if fh is not None:
                for r in records:
                    fh.write(_dump(r) + "\n")
                fh.write(_dump(summary) + "\n")
                for st in state.students:
                    save_checkpoint(st, out_dir / "checkpoints" / f"{st.name}_e{epoch:03d}.ckpt")
            if keep_steps:
                steps.extend(records)
            epochs.append(summary)
            log.info("epoch %d q_m=%.3f val=%s", epoch, state.controller.q_m,
                     {k: v["val_miou"] for k, v in summary["students"].items()})
    finally:
        if fh is not None:
            fh.close()
    if out_dir is not None:
        for st in state.students:
            save_checkpoint(st, out_dir / "checkpoints" / f"{st.name}_final.ckpt")
    return TrainResult(state.students, steps, epochs)


def export_distillation_set(students, unlabeled: list[PointCloud], labeled: list[PointCloud],
                            path: str | Path) -> list[Path]:
    """Write labeled scenes with ground truth and unlabeled scenes with ensemble labels.

    Origin bytes mark the label source: 0 = ground truth, 1 = ensemble pseudo-label.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    k = students[0].num_classes if students else None
    written = []
    manifest = []
    for i, c in enumerate(labeled):
        cloud = PointCloud(c.points, c.labels, np.full(c.n, ORIGIN_A, np.uint8), c.num_classes or k)
        p = path / f"labeled_{i:04d}.pcls"
        write_cloud(cloud, p)
        written.append(p)
        manifest.append({"file": p.name, "source": "ground_truth"})
    for i, c in enumerate(unlabeled):
        preds = ensemble_predict(students, c) if c.n else np.zeros(0, np.int64)
        cloud = PointCloud(c.points, preds, np.full(c.n, ORIGIN_B, np.uint8), k)
        p = path / f"pseudo_{i:04d}.pcls"
        write_cloud(cloud, p)
        written.append(p)
        manifest.append({"file": p.name, "source": "ensemble"})
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return written


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
