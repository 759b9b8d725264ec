"""Mini-batch training with early stopping, metrics, and K-fold orchestration."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import Dataset, kfold_split, stratified_holdout
from .model import AsyrecParams, ClipPrediction, ForwardOptions, loss, predict_arrays, predict_video
from .optim import OptimizerState, optimizer_step


@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-4
    weight_decay: float = 5e-4
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    val_fraction: float = 0.2
    aggregate: str = "counterpart"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if not 0 <= self.patience < self.max_epochs:
            raise ValueError(f"patience must lie in [0, max_epochs), got {self.patience}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_uar: float
    best: bool


# ------------------------------------------------------------------ metrics

def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


def recall_per_class(cm: np.ndarray) -> list[float | None]:
    """TP / (TP + FN) per class; ``None`` marks a class with no true instances."""
    cm = np.asarray(cm)
    out: list[float | None] = []
    for k in range(cm.shape[0]):
        total = cm[k].sum()
        out.append(float(cm[k, k] / total) if total > 0 else None)
    return out


def uar(recalls) -> float:
    """Unweighted mean of the defined per-class recalls."""
    defined = [r for r in recalls if r is not None and not (isinstance(r, float) and math.isnan(r))]
    if not defined:
        raise ValueError("UAR undefined: no class has test instances")
    return float(sum(defined) / len(defined))


def argmax_lowest(p: np.ndarray) -> np.ndarray:
    """Argmax along the last axis; ties go to the lowest class index."""
    return np.argmax(p, axis=-1)


@dataclass
class DirectionReport:
    confusion: np.ndarray
    recalls: list[float | None]
    uar: float
    undefined: list[str] = field(default_factory=list)

    @classmethod
    def from_predictions(cls, y_true, probs, classes) -> "DirectionReport":
        cm = confusion_matrix(y_true, argmax_lowest(probs), len(classes))
        rec = recall_per_class(cm)
        return cls(cm, rec, uar(rec), [classes[k] for k, r in enumerate(rec) if r is None])

    def to_dict(self) -> dict:
        return {"confusion": self.confusion.tolist(), "recalls": self.recalls,
                "uar": self.uar, "undefined": self.undefined}


@dataclass
class MetricsReport:
    classes: tuple[str, ...]
    clip: dict[str, DirectionReport]
    video: dict[str, DirectionReport]

    @property
    def uar(self) -> float:
        """Mean clip-level UAR over the available directions."""
        return float(np.mean([r.uar for r in self.clip.values()]))

    @property
    def video_uar(self) -> float:
        return float(np.mean([r.uar for r in self.video.values()]))

    def to_dict(self) -> dict:
        return {"classes": list(self.classes), "uar": self.uar, "video_uar": self.video_uar,
                "clip": {k: v.to_dict() for k, v in self.clip.items()},
                "video": {k: v.to_dict() for k, v in self.video.items()}}


def video_probs(p: np.ndarray, owner: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Per-dyad mean of clip distributions (rows ordered by first appearance)."""
    order = list(dict.fromkeys(owner.tolist()))
    return np.stack([
        predict_video([ClipPrediction(p[k], None, int(t[k])) for k in np.flatnonzero(owner == o)])[0]
        for o in order
    ]) if order else np.zeros((0, p.shape[-1]))


def evaluate(params: AsyrecParams, test_set: Dataset, opts: ForwardOptions | None = None) -> MetricsReport:
    """Clip-level and video-level confusion, recall and UAR per direction."""
    if test_set.schema != params.schema:
        raise ValueError(f"dataset schema {test_set.schema.name} does not match model schema {params.schema.name}")
    arr = test_set.arrays()
    if len(arr) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    p_ij, p_ji = predict_arrays(params, arr, opts)
    classes = params.schema.classes
    first = np.unique(arr.dyad, return_index=True)[1]
    clip = {"i->j": DirectionReport.from_predictions(arr.y_ij, p_ij, classes)}
    video = {"i->j": DirectionReport.from_predictions(arr.y_ij[first], video_probs(p_ij, arr.dyad, arr.t), classes)}
    if p_ji is not None:
        clip["j->i"] = DirectionReport.from_predictions(arr.y_ji, p_ji, classes)
        video["j->i"] = DirectionReport.from_predictions(arr.y_ji[first], video_probs(p_ji, arr.dyad, arr.t), classes)
    return MetricsReport(classes, clip, video)


# ------------------------------------------------------------------ training

def train(train_set: Dataset, val_set: Dataset, cfg: TrainConfig,
          params: AsyrecParams | None = None) -> tuple[AsyrecParams, list[EpochRecord]]:
    """Adam over shuffled mini-batches; returns the best-validation-UAR snapshot."""
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("train and validation splits must be non-empty")
    if train_set.schema != val_set.schema:
        raise ValueError("train and validation splits use different schemas")
    if params is None:
        params = AsyrecParams.init(train_set.feature_dim, train_set.schema, cfg.seed, aggregate=cfg.aggregate)
        params.fit_standardizer(train_set)
    arr = train_set.arrays()
    bidir = params.head_ji is not None
    rng = np.random.default_rng([cfg.seed, 21])
    state = OptimizerState(lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    plist = params.parameters()

    best_uar, best = -math.inf, params.copy()
    history: list[EpochRecord] = []
    since_best = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(arr))
        losses, weights = [], []
        for s in range(0, len(order), cfg.batch_size):
            b = arr.take(order[s:s + cfg.batch_size])
            for p in plist:
                p.grad = None
            with T.Tape():
                L = loss(params, b.x, b.t, b.t_max, b.y_ij, b.y_ji if bidir else None)
                grads = T.backward(L, plist)
            optimizer_step(state, plist, grads)
            losses.append(float(L.data))
            weights.append(len(b))
        val = evaluate(params, val_set).uar
        improved = val > best_uar
        if improved:
            best_uar, best = val, params.copy()
            since_best = 0
        else:
            since_best += 1
        history.append(EpochRecord(epoch, float(np.average(losses, weights=weights)), val, improved))
        if since_best >= cfg.patience:
            break
    return best, history


@dataclass
class FoldResult:
    fold: int
    params: AsyrecParams
    history: list[EpochRecord]
    report: MetricsReport
    test_set: Dataset


@dataclass
class CrossValidation:
    folds: list[FoldResult]

    @property
    def uars(self) -> list[float]:
        return [f.report.uar for f in self.folds]

    @property
    def mean(self) -> float:
        return float(np.mean(self.uars))

    @property
    def std(self) -> float:
        """Population standard deviation across folds."""
        return float(np.std(self.uars))

    def to_dict(self) -> dict:
        per_dir = {}
        for key in self.folds[0].report.clip:
            vals = [f.report.clip[key].uar for f in self.folds]
            per_dir[key] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))}
        return {
            "folds": [{"fold": f.fold, "epochs": len(f.history), "test_dyads": len(f.test_set),
                       **f.report.to_dict()} for f in self.folds],
            "uar": {"mean": self.mean, "std": self.std, "per_fold": self.uars, "by_direction": per_dir},
        }


def fold_seed(seed: int, fold: int) -> int:
    return seed + fold


def _run_fold(args) -> FoldResult:
    fold, train_part, test_part, cfg = args
    fcfg = TrainConfig(**{**asdict(cfg), "seed": fold_seed(cfg.seed, fold)})
    fit, val = stratified_holdout(train_part, cfg.val_fraction, fcfg.seed)
    if len(val) == 0:
        fit, val = train_part, train_part
    params, history = train(fit, val, fcfg)
    return FoldResult(fold, params, history, evaluate(params, test_part), test_part)


def cross_validate(dataset: Dataset, k: int, cfg: TrainConfig, workers: int = 1) -> CrossValidation:
    """Train and test on each of ``k`` dyad-level folds with derived seeds."""
    jobs = [(f, tr, te, cfg) for f, (tr, te) in enumerate(kfold_split(dataset, k, cfg.seed))]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=min(workers, k)) as pool:
            results = list(pool.map(_run_fold, jobs))
    else:
        results = [_run_fold(j) for j in jobs]
    return CrossValidation(results)


def report_json(payload: dict) -> str:
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def confusion_csv(report: MetricsReport, fold: int | str = "") -> list[str]:
    """Rows ``fold,level,direction,true,pred,count`` for plotting."""
    rows = []
    for level, block in (("clip", report.clip), ("video", report.video)):
        for direction, r in block.items():
            for a, ta in enumerate(report.classes):
                for b, tb in enumerate(report.classes):
                    rows.append(f"{fold},{level},{direction},{ta},{tb},{int(r.confusion[a, b])}")
    return rows
