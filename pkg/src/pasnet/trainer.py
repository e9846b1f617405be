"""Adam, step-decay schedule, per-fold training and the cross-validation drivers."""
from __future__ import annotations

import concurrent.futures as cf
import csv
import json
import logging
import math
import multiprocessing
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dataset import FoldPlan, VolumeDataset, stratified_kfold
from .losses import LossConfig, bce_with_logits, cross_entropy_logits, total_loss
from .metrics import FoldResult, MetricsReport, PredictionSet, SingleClassError, accuracy, dice, per_class_auc, softmax
from .model import CLASS_NAMES, ModelConfig, PasNet, build, save_checkpoint
from .tensor import DTYPE, NonFiniteError, Tensor, backward, no_grad

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 16
    epochs: int = 500
    lam: float = 1.0
    gamma: float = 0.5
    lr_step_epochs: int = 100
    k_folds: int = 5
    seed: int = 0
    with_decoder: bool = True
    n_f: int = 16
    eval_every: int = 10
    parallel_folds: int = 1

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr: must be positive, got {self.lr!r}")
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma: must lie in (0, 1], got {self.gamma!r}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size: must be at least 1, got {self.batch_size!r}")
        if self.epochs < 1:
            raise ValueError(f"epochs: must be at least 1, got {self.epochs!r}")
        if self.lr_step_epochs < 1:
            raise ValueError(f"lr_step_epochs: must be at least 1, got {self.lr_step_epochs!r}")
        if not (self.lam >= 0 and math.isfinite(self.lam)):
            raise ValueError(f"lam: must be a finite non-negative float, got {self.lam!r}")
        if self.k_folds < 2:
            raise ValueError(f"k_folds: must be at least 2, got {self.k_folds!r}")

    def model_config(self, geometry: Tuple[int, int, int]) -> ModelConfig:
        n_in, h, w = geometry
        if h != w:
            raise ValueError(f"volumes must be square, got {h}x{w}")
        return ModelConfig(n_in=n_in, n_f=self.n_f, input_hw=h, with_decoder=self.with_decoder)


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return cfg.lr * cfg.gamma ** (epoch // cfg.lr_step_epochs)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: Sequence[Tuple[str, Tensor]], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place. Parameters without a gradient are skipped."""
    for name, p in params:
        g = p.grad
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"{name}: non-finite gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params:
        g = p.grad
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(DTYPE)


# ---------------------------------------------------------------------------
# evaluation


def predict(net: PasNet, images: np.ndarray, batch_size: int = 32) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Eval-mode softmax probabilities and (if a decoder exists) mask logits."""
    probs, masks = [], []
    with no_grad():
        for s in range(0, len(images), batch_size):
            logits, m = net.forward(Tensor(images[s:s + batch_size]), training=False)
            probs.append(softmax(logits.data))
            if m is not None:
                masks.append(m.data)
    return np.concatenate(probs), (np.concatenate(masks) if masks else None)


def evaluate(net: PasNet, data: VolumeDataset, batch_size: int = 32) -> dict:
    probs, mask_logits = predict(net, data.images, batch_size)
    p = PredictionSet(probs, data.labels)
    out = {"accuracy": accuracy(p), "probs": probs}
    try:
        out["class_auc"] = per_class_auc(p)
        out["auc"] = float(np.mean([a for a in out["class_auc"] if a is not None]))
    except SingleClassError:
        out["class_auc"] = [None] * len(CLASS_NAMES)
        out["auc"] = float("nan")
    if mask_logits is not None:
        out["dice"] = float(np.mean([dice(mask_logits[i] > 0, data.masks[i]) for i in range(len(data))]))
    return out


# ---------------------------------------------------------------------------
# training


@dataclass
class RunRecord:
    config: dict
    seed: int
    fold: Optional[int] = None
    epochs: List[dict] = field(default_factory=list)
    evals: List[dict] = field(default_factory=list)
    wall_clock: float = 0.0
    status: str = "ok"
    error: Optional[str] = None

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingAborted(RuntimeError):
    """Training hit a numeric failure; carries the last good weights and the record so far."""

    def __init__(self, message: str, record: RunRecord, last_good: Dict[str, np.ndarray]):
        super().__init__(message)
        self.record = record
        self.last_good = last_good


def train_fold(data: VolumeDataset, train_idx, val_idx, cfg: TrainConfig,
               fold: Optional[int] = None) -> Tuple[PasNet, RunRecord]:
    """Train one model on ``train_idx``; score ``val_idx`` every ``eval_every`` epochs and at the end."""
    tag = 0 if fold is None else fold + 1
    net = build(cfg.model_config(data.geometry), seed=derive_seed(cfg.seed, tag, 0))
    params = net.parameters()
    state = AdamState()
    loss_cfg = LossConfig(cfg.lam)
    train_idx = np.asarray(train_idx)
    val_idx = np.asarray(val_idx) if val_idx is not None else np.zeros(0, dtype=np.int64)
    record = RunRecord(config=asdict(cfg), seed=cfg.seed, fold=fold)
    last_good = {k: v.copy() for k, v in net.state_dict().items()}
    t0 = time.perf_counter()

    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = np.random.default_rng(derive_seed(cfg.seed, tag, 1, epoch)).permutation(train_idx)
        sums = np.zeros(3)
        try:
            for s in range(0, len(order), cfg.batch_size):
                b = np.sort(order[s:s + cfg.batch_size])
                logits, masks = net.forward(Tensor(data.images[b]), training=True)
                l_cls = cross_entropy_logits(logits, data.labels[b])
                if masks is not None:
                    l_seg = bce_with_logits(masks, data.masks[b])
                    loss = total_loss(l_cls, l_seg, loss_cfg)
                    seg_val = float(l_seg.data)
                else:
                    loss, seg_val = l_cls, 0.0
                net.zero_grad()
                backward(loss)
                adam_step(params, state, lr)
                sums += len(b) * np.array([float(loss.data), float(l_cls.data), seg_val])
        except NonFiniteError as exc:
            record.status = "aborted"
            record.error = f"epoch {epoch}: {exc}"
            record.wall_clock = time.perf_counter() - t0
            raise TrainingAborted(record.error, record, last_good) from exc
        mean = sums / len(order)
        record.epochs.append({"epoch": epoch, "lr": lr, "loss": mean[0], "cls": mean[1], "seg": mean[2]})
        last_good = {k: v.copy() for k, v in net.state_dict().items()}

        last = epoch == cfg.epochs - 1
        if len(val_idx) and (last or (cfg.eval_every and (epoch + 1) % cfg.eval_every == 0)):
            ev = evaluate(net, data.subset(val_idx))
            record.evals.append({"epoch": epoch, "auc": ev["auc"], "accuracy": ev["accuracy"],
                                 "class_auc": ev["class_auc"]})
            log.info("fold %s epoch %d loss %.4f val auc %.4f acc %.4f", fold, epoch, mean[0], ev["auc"],
                     ev["accuracy"])

    record.wall_clock = time.perf_counter() - t0
    return net, record


# ---------------------------------------------------------------------------
# cross-validation and ablations


@dataclass
class CVResult:
    report: MetricsReport
    runs: List[RunRecord]
    plan: FoldPlan
    nets: List[Optional[PasNet]] = field(default_factory=list)


def _run_fold(data: VolumeDataset, plan: FoldPlan, cfg: TrainConfig, i: int):
    train_idx, val_idx = plan.split(i)
    try:
        net, rec = train_fold(data, train_idx, val_idx, cfg, fold=i)
    except TrainingAborted as exc:
        return None, exc.record, FoldResult(i, float("nan"), float("nan"), [None] * 4, failed=True)
    last = rec.evals[-1]
    return net, rec, FoldResult(i, last["auc"], last["accuracy"], last["class_auc"])


def cross_validate(data: VolumeDataset, cfg: TrainConfig, plan: Optional[FoldPlan] = None,
                   out_dir=None) -> CVResult:
    """Train k independent models on a stratified plan and score each held-out fold.

    A fold that aborts is marked failed and excluded from the means; the
    report's ``warning`` flag is then set.
    """
    if plan is None:
        plan = stratified_kfold(data.labels, cfg.k_folds, cfg.seed)
    if cfg.parallel_folds > 1:
        ctx = multiprocessing.get_context("fork")
        with cf.ProcessPoolExecutor(cfg.parallel_folds, mp_context=ctx) as pool:
            outs = list(pool.map(_run_fold, *zip(*[(data, plan, cfg, i) for i in range(plan.k)])))
    else:
        outs = [_run_fold(data, plan, cfg, i) for i in range(plan.k)]
    report = MetricsReport([o[2] for o in outs])
    if report.warning:
        log.warning("some folds failed; means cover %d of %d folds", len(report.completed), plan.k)
    result = CVResult(report, [o[1] for o in outs], plan, [o[0] for o in outs])
    if out_dir is not None:
        write_cv_outputs(result, out_dir)
    return result


def write_cv_outputs(result: CVResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.report.write_csv(out / "metrics.csv")
    result.report.write_class_csv(out / "per_class_auc.csv", CLASS_NAMES)
    run = {"runs": [r.to_dict() for r in result.runs], "report": result.report.to_dict(),
           "folds": [f.tolist() for f in result.plan.folds], "plan_seed": result.plan.seed}
    (out / "run.json").write_text(json.dumps(run, indent=1, default=_json_default) + "\n")
    for i, net in enumerate(result.nets):
        if net is not None:
            save_checkpoint(net, out / f"fold_{i}.pasw")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


BRANCH_COLUMNS = ("backbone", "segmentation_branch", "auc")
LAMBDA_COLUMNS = ("lambda", "auc", "accuracy")


def ablate_branch(data: VolumeDataset, cfg: TrainConfig, plan: Optional[FoldPlan] = None):
    """Backbone alone vs backbone + segmentation branch (lambda=1) on one shared fold plan."""
    if plan is None:
        plan = stratified_kfold(data.labels, cfg.k_folds, cfg.seed)
    backbone = cross_validate(data, replace(cfg, with_decoder=False), plan)
    full = cross_validate(data, replace(cfg, with_decoder=True, lam=1.0), plan)
    rows = [
        {"backbone": 1, "segmentation_branch": 0, "auc": backbone.report.mean_auc},
        {"backbone": 1, "segmentation_branch": 1, "auc": full.report.mean_auc},
    ]
    return rows, {"backbone": backbone, "full": full}


def sweep_lambda(data: VolumeDataset, cfg: TrainConfig, lambdas: Sequence[float],
                 plan: Optional[FoldPlan] = None):
    """One cross-validation per lambda, all on the same fold plan."""
    lambdas = [float(x) for x in lambdas]
    if not lambdas or any(not (x >= 0) for x in lambdas):
        raise ValueError("lambdas must be a non-empty list of non-negative values")
    if plan is None:
        plan = stratified_kfold(data.labels, cfg.k_folds, cfg.seed)
    rows, results = [], {}
    for lam in lambdas:
        res = cross_validate(data, replace(cfg, lam=lam, with_decoder=True), plan)
        results[lam] = res
        rows.append({"lambda": lam, "auc": res.report.mean_auc, "accuracy": res.report.mean_accuracy})
    return rows, results


def write_table(rows: Sequence[dict], columns: Sequence[str], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
