"""Training, evaluation, ablation sweeps and robustness evaluation."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics
from .attention import AgentFusionModel, ModelConfig
from .config import TrainConfig, config_hash
from .data import Dataset, FrameStub, generate_dataset, perturb_dataset
from .metrics import MetricReport, PredictionRecord, evaluate_records
from .perturbations import PERTURBATIONS, make_config
from .streams import SceneConfig

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint: Path | None, epoch: int, step: int):
        super().__init__(message)
        self.checkpoint, self.epoch, self.step = checkpoint, epoch, step


@dataclass
class RunRecord:
    config_hash: str
    seed: int
    epoch_losses: list[float] = field(default_factory=list)
    report: MetricReport | None = None
    wall_clock: float = 0.0
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["report"] = None if self.report is None else self.report.to_dict()
        return out


# -- schedule and optimizer --------------------------------------------------------------
def learning_rate(step: int, total_steps: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 over the first ``warmup_ratio`` of steps, then
    ``lr * lr_decay**k`` where ``k`` counts whole epochs since warmup ended."""
    warmup = int(round(cfg.warmup_ratio * total_steps))
    if step < warmup:
        return cfg.lr * step / warmup
    return cfg.lr * cfg.lr_decay ** ((step - warmup) // max(steps_per_epoch, 1))


class Adam:
    """Adaptive moment estimation with bias correction."""

    def __init__(self, params: Sequence[numerics.Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- train / evaluate ---------------------------------------------------------------------
def build_model(cfg: TrainConfig, ds: Dataset) -> AgentFusionModel:
    return AgentFusionModel(cfg.model_config(ds.n_classes), ds.shapes, seed=cfg.seed)


def train(cfg: TrainConfig, ds: Dataset, out_dir: str | Path | None = None,
          progress: Callable[[int, float, AgentFusionModel], None] | None = None) -> tuple[AgentFusionModel, RunRecord]:
    """Minibatch Adam on ``BCE + box_weight * MSE``; deterministic given ``cfg.seed``.

    On a non-finite loss the last good parameters are written to
    ``out_dir/last_good`` (when an output directory is given) and
    :class:`TrainingDiverged` is raised.
    """
    if len(ds) == 0:
        raise ValueError("cannot train on an empty dataset")
    model = build_model(cfg, ds)
    params = model.parameters()
    opt = Adam(params, cfg.beta1, cfg.beta2, cfg.eps)
    steps_per_epoch = math.ceil(len(ds) / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    record = RunRecord(config_hash(cfg, ds.meta), cfg.seed, config=asdict(cfg))
    start = time.perf_counter()
    step = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(ds))
        losses = []
        for b in range(steps_per_epoch):
            idx = np.sort(order[b * cfg.batch_size:(b + 1) * cfg.batch_size])
            good = model.state_dict()
            try:
                loss = model.loss(ds.batch(idx))
                value = loss.item()
                if not math.isfinite(value):
                    raise FloatingPointError(f"loss is {value}")
                grads = numerics.grad(loss, params)
            except FloatingPointError as exc:
                ckpt = None
                if out_dir is not None:
                    model.load_state_dict(good)
                    ckpt = model.save(Path(out_dir) / "last_good")
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}: {exc}",
                                       ckpt, epoch, step) from exc
            opt.step(grads, learning_rate(step, total, steps_per_epoch, cfg))
            losses.append(value)
            step += 1
        record.epoch_losses.append(float(np.mean(losses)))
        log.info("epoch %d loss %.6f", epoch, record.epoch_losses[-1])
        if progress is not None:
            progress(epoch, record.epoch_losses[-1], model)
    record.wall_clock = time.perf_counter() - start
    if out_dir is not None:
        out = Path(out_dir)
        model.save(out / "checkpoint")
        (out / "run.json").write_text(json.dumps(record.to_dict(), indent=2, sort_keys=True))
    return model, record


def dataset_loss(model: AgentFusionModel, ds: Dataset, batch_size: int = 256) -> float:
    """Mean per-scene objective over the whole dataset, without gradients."""
    total = 0.0
    with numerics.no_grad():
        for start in range(0, len(ds), batch_size):
            idx = np.arange(start, min(start + batch_size, len(ds)))
            total += model.loss(ds.batch(idx)).item() * len(idx)
    return total / len(ds)


def check_compatible(model: AgentFusionModel, ds: Dataset) -> None:
    if len(ds) == 0:
        return
    if ds.shapes != model.shapes:
        raise ValueError(f"dataset stream shapes {ds.shapes} do not match checkpoint {model.shapes}")
    if ds.n_classes != model.cfg.n_classes:
        raise ValueError(f"dataset has {ds.n_classes} classes, checkpoint expects {model.cfg.n_classes}")


def predict_dataset(model: AgentFusionModel, ds: Dataset, batch_size: int = 256) -> list[PredictionRecord]:
    check_compatible(model, ds)
    out = []
    with numerics.no_grad():
        for start in range(0, len(ds), batch_size):
            idx = np.arange(start, min(start + batch_size, len(ds)))
            scores, box = model.forward(ds.batch(idx))
            for j, i in enumerate(idx):
                out.append(PredictionRecord(ds.ids[i], scores.data[j], box.data[j], ds.labels[i], ds.boxes[i]))
    return out


def evaluate(model: AgentFusionModel, ds: Dataset) -> MetricReport:
    return evaluate_records(predict_dataset(model, ds))


def train_and_evaluate(cfg: TrainConfig, train_ds: Dataset, test_ds: Dataset) -> RunRecord:
    model, record = train(cfg, train_ds)
    record.report = evaluate(model, test_ds)
    return record


# -- ablations -----------------------------------------------------------------------------
MODULE_SWITCHES = {
    "full": {},
    "no_alsaf": {"fusion": "addition"},
    "no_caaf": {"caaf": False},
    "no_catf": {"catf": False},
    "no_lsas": {"lsas": False},
}
FUSION_AXIS = {"ours": "alsaf", "alsaf": "alsaf", "addition": "addition",
               "concatenation": "concatenation", "multiplication": "multiplication"}
AXES = ("fusion-mode", "module-switch", "agents", "heads", "frames")


def axis_changes(axis: str, value) -> dict:
    """Config fields to change for one ablation value; raises on invalid values."""
    if axis == "fusion-mode":
        if value not in FUSION_AXIS:
            raise ValueError(f"fusion-mode value {value!r} not in {sorted(FUSION_AXIS)}")
        return {"fusion": FUSION_AXIS[value]}
    if axis == "module-switch":
        if value not in MODULE_SWITCHES:
            raise ValueError(f"module-switch value {value!r} not in {sorted(MODULE_SWITCHES)}")
        return dict(MODULE_SWITCHES[value])
    if axis in ("agents", "heads", "frames"):
        v = int(value)
        if v < 1:
            raise ValueError(f"{axis} must be positive, got {value!r}")
        return {{"agents": "n_agents", "heads": "heads", "frames": "frames"}[axis]: v}
    raise ValueError(f"unknown ablation axis {axis!r}; expected one of {AXES}")


@dataclass
class AblationRow:
    axis: str
    value: str
    seed: int
    record: RunRecord


def run_ablation(axis: str, values: Sequence, base: TrainConfig, scene: SceneConfig,
                 n_train: int, n_test: int, seeds: Sequence[int] = (0,)) -> list[AblationRow]:
    """One train+evaluate per (value, seed).  Only the axis field (and the seed) vary.

    Train scenes are indices ``0..n_train-1`` and test scenes follow them, so
    every run of a sweep sees the same data unless the axis is ``frames``.
    """
    changes = [axis_changes(axis, v) for v in values]  # validate everything before running
    for ch in changes:
        cfg = replace(base, **ch)
        if cfg.n_agents > cfg.n_tokens:
            raise ValueError(f"n_agents={cfg.n_agents} exceeds n_tokens={cfg.n_tokens}")
        if cfg.dim % cfg.heads:
            raise ValueError(f"dim={cfg.dim} not divisible by heads={cfg.heads}")
    cache: dict[int, tuple[Dataset, Dataset]] = {}
    rows = []
    for value, ch in zip(values, changes):
        cfg = replace(base, **ch)
        frames = cfg.frames
        if frames not in cache:
            sc = replace(scene, frames=frames)
            cache[frames] = (generate_dataset(sc, n_train, 0), generate_dataset(sc, n_test, n_train))
        train_ds, test_ds = cache[frames]
        for seed in seeds:
            rec = train_and_evaluate(replace(cfg, seed=seed), train_ds, test_ds)
            rows.append(AblationRow(axis, str(value), seed, rec))
    return rows


TABLE_FIELDS = ("axis", "value", "seed", "mAP", "AUROC", "mIOU", "mAP@0.2", "mAP@0.5", "final_loss",
                "config_hash")


def ablation_table(rows: Sequence[AblationRow]) -> list[dict]:
    out = []
    for r in rows:
        rep = r.record.report
        out.append({
            "axis": r.axis, "value": r.value, "seed": r.seed,
            "mAP": rep.mAP, "AUROC": rep.AUROC, "mIOU": rep.mIOU,
            "mAP@0.2": rep.map_at_iou.get("0.2"), "mAP@0.5": rep.map_at_iou.get("0.5"),
            "final_loss": r.record.epoch_losses[-1] if r.record.epoch_losses else None,
            "config_hash": r.record.config_hash,
        })
    return out


def write_table_csv(path: str | Path, table: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TABLE_FIELDS)
        w.writeheader()
        w.writerows(table)


# -- robustness -----------------------------------------------------------------------------
@dataclass
class RobustnessReport:
    kind: str
    config: dict
    clean: MetricReport
    corrupted: MetricReport

    @property
    def deltas(self) -> dict[str, float | None]:
        out = {}
        for key in ("mAP", "AUROC", "mIOU"):
            a, b = getattr(self.clean, key), getattr(self.corrupted, key)
            out[key] = None if a is None or b is None else b - a
        return out

    def to_dict(self) -> dict:
        return {"kind": self.kind, "config": self.config, "clean": self.clean.to_dict(),
                "corrupted": self.corrupted.to_dict(), "deltas": self.deltas}


def robustness_eval(model: AgentFusionModel, ds: Dataset, kind: str, seed: int = 0,
                    stub: FrameStub = FrameStub(), **overrides) -> RobustnessReport:
    """Evaluate on the stub-rendered VT frames, clean and corrupted by ``kind``.

    Both variants go through the same render/read-back, so an identity
    corruption yields identical reports.
    """
    cfg = make_config(kind, seed=seed, **overrides)
    fn = PERTURBATIONS[kind][0]
    clean = perturb_dataset(ds, None, stub)
    corrupted = perturb_dataset(ds, lambda frame, i: fn(frame, cfg, frame_index=i), stub)
    return RobustnessReport(kind, asdict(cfg), evaluate(model, clean), evaluate(model, corrupted))
