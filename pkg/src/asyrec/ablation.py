"""Inference-time ablations scored by fidelity (mean L1 between output distributions)."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset
from .graph import PAIR_LABELS, pair_mask, parse_pair
from .model import AsyrecParams, ForwardOptions, predict_arrays
from .train import DirectionReport, MetricsReport, evaluate, video_probs

KINDS = ("no_node_att", "no_edge_att", "temporal_parity", "modality_edge", "segment")
PARITIES = ("odd", "even")
REGIONS = ("beginning", "middle", "end")
PARITY_RATIOS = tuple(k / 10 for k in range(1, 10))
SEGMENT_RATIOS = (0.1, 0.2, 0.3)
CSV_COLUMNS = ("kind", "parity", "ratio", "pair", "region", "seed", "fold", "dF", "uar", "dF_ij", "dF_ji")


@dataclass(frozen=True)
class MaskSpec:
    kind: str
    parity: str | None = None
    ratio: float | None = None
    pair: str | None = None
    region: str | None = None
    seed: int = 0
    renormalize: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown mask kind {self.kind!r}; valid kinds: {', '.join(KINDS)}")
        wanted = {"temporal_parity": {"parity", "ratio"}, "modality_edge": {"pair"},
                  "segment": {"ratio", "region"}}.get(self.kind, set())
        for name in ("parity", "ratio", "pair", "region"):
            if (getattr(self, name) is not None) != (name in wanted):
                state = "requires" if name in wanted else "does not take"
                raise ValueError(f"mask kind {self.kind} {state} field {name!r}")
        if self.ratio is not None and not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"ratio must lie in [0, 1], got {self.ratio}")
        if self.parity is not None and self.parity not in PARITIES:
            raise ValueError(f"parity must be odd or even, got {self.parity!r}")
        if self.region is not None and self.region not in REGIONS:
            raise ValueError(f"region must be one of {', '.join(REGIONS)}, got {self.region!r}")
        if self.pair is not None:
            parse_pair(self.pair)


@dataclass
class FidelityReport:
    spec: MaskSpec
    per_fold: list[float]
    dF: float
    uar: list[float] = field(default_factory=list)
    per_direction: dict[str, list[float]] = field(default_factory=dict)

    def direction_dF(self, key: str) -> float:
        return float(np.mean(self.per_direction[key]))


def fidelity(original, masked) -> tuple[float, list[float]]:
    """Mean over folds of the per-fold mean L1 distance.

    Each argument is one ``(N, C)`` array (a single fold) or a sequence of
    them, one per fold.
    """
    if isinstance(original, np.ndarray):
        original, masked = [original], [masked]
    if len(original) != len(masked):
        raise ValueError(f"fold count mismatch: {len(original)} vs {len(masked)}")
    if not original:
        raise ValueError("fidelity needs at least one fold")
    per_fold = []
    for k, (o, p) in enumerate(zip(original, masked)):
        o, p = np.asarray(o, dtype=np.float64), np.asarray(p, dtype=np.float64)
        if o.shape != p.shape:
            raise ValueError(f"fold {k}: output shapes differ, {o.shape} vs {p.shape}")
        if o.shape[0] == 0:
            raise ValueError(f"fold {k} has no observations")
        per_fold.append(float(np.abs(o - p).sum(axis=-1).mean()))
    return float(np.mean(per_fold)), per_fold


# ------------------------------------------------------------------ variants

@dataclass
class Variant:
    """A trained model evaluated under fixed forward switches."""

    params: AsyrecParams
    opts: ForwardOptions

    def predict(self, ds: Dataset):
        return predict_arrays(self.params, ds.arrays(), self.opts)

    def evaluate(self, ds: Dataset) -> MetricsReport:
        return evaluate(self.params, ds, self.opts)


def variant_no_node_attention(params: AsyrecParams) -> Variant:
    return Variant(params, ForwardOptions(node_att=False))


def variant_no_edge_attention(params: AsyrecParams) -> Variant:
    return Variant(params, ForwardOptions(edge_att=False))


# ------------------------------------------------------------------ masks

def parity_sample(t: np.ndarray, parity: str, ratio: float, seed: int) -> np.ndarray:
    """Boolean mask over clips: a seeded ``ratio`` share of the given parity.

    The order is drawn once per seed, so a larger ratio masks a superset.
    """
    t = np.asarray(t, dtype=np.int64)
    cand = np.flatnonzero(t % 2 == (1 if parity == "odd" else 0))
    order = np.random.default_rng([seed, 5]).permutation(cand.size)
    k = int(math.floor(ratio * cand.size + 0.5))
    out = np.zeros(t.shape, dtype=bool)
    out[cand[order[:k]]] = True
    return out


def segment_span(n: int, ratio: float, region: str) -> range:
    """Contiguous clip indices of ``region`` covering ``ratio`` of ``n`` clips."""
    k = int(math.floor(ratio * n + 0.5))
    if k >= n:
        raise ValueError(f"segment mask of ratio {ratio} removes all {n} clips of a dyad")
    if region == "beginning":
        start = 0
    elif region == "end":
        start = n - k
    elif region == "middle":
        start = n // 2 - k // 2
    else:
        raise ValueError(f"region must be one of {', '.join(REGIONS)}, got {region!r}")
    return range(start, start + k)


def _directions(p_ij, p_ji) -> dict[str, np.ndarray]:
    out = {"i->j": p_ij}
    if p_ji is not None:
        out["j->i"] = p_ji
    return out


def _clip_report(params, arr, probs: dict[str, np.ndarray]) -> float:
    ys = {"i->j": arr.y_ij, "j->i": arr.y_ji}
    return float(np.mean([DirectionReport.from_predictions(ys[k], p, params.schema.classes).uar
                          for k, p in probs.items()]))


def _fold_outputs(params: AsyrecParams, ds: Dataset, spec: MaskSpec):
    """Original and masked outputs per direction, plus the masked UAR."""
    arr = ds.arrays()
    if len(arr) == 0:
        raise ValueError("cannot ablate on an empty dataset")
    base = _directions(*predict_arrays(params, arr))
    if spec.kind == "segment":
        return _segment_outputs(params, arr, base, spec)
    if spec.kind == "no_node_att":
        opts = variant_no_node_attention(params).opts
    elif spec.kind == "no_edge_att":
        opts = variant_no_edge_attention(params).opts
    elif spec.kind == "modality_edge":
        opts = ForwardOptions(edge_mask=pair_mask([spec.pair]), renormalize=spec.renormalize)
    else:
        keep = 1.0 - parity_sample(arr.t, spec.parity, spec.ratio, spec.seed)
        opts = ForwardOptions(time_keep=keep)
    masked = _directions(*predict_arrays(params, arr, opts))
    return base, masked, _clip_report(params, arr, masked)


def _segment_outputs(params, arr, base, spec):
    keep = np.ones(len(arr), dtype=bool)
    for dyad in np.unique(arr.dyad):
        rows = np.flatnonzero(arr.dyad == dyad)
        span = segment_span(rows.size, spec.ratio, spec.region)
        keep[rows[arr.t[rows].argsort()][list(span)]] = False
    first = np.unique(arr.dyad, return_index=True)[1]
    first.sort()
    ys = {"i->j": arr.y_ij[first], "j->i": arr.y_ji[first]}
    orig, masked, uars = {}, {}, []
    for key, p in base.items():
        orig[key] = video_probs(p, arr.dyad, arr.t)
        masked[key] = video_probs(p[keep], arr.dyad[keep], arr.t[keep])
        uars.append(DirectionReport.from_predictions(ys[key], masked[key], params.schema.classes).uar)
    return orig, masked, float(np.mean(uars))


def run_mask(folds: Sequence[tuple[AsyrecParams, Dataset]], spec: MaskSpec) -> FidelityReport:
    """Score one mask over every (params, test set) fold.

    ``dF`` pools both directions as observations; ``per_direction`` keeps the
    per-direction values.
    """
    outs = [_fold_outputs(p, ds, spec) for p, ds in folds]
    keys = list(outs[0][0])
    pooled = fidelity([np.concatenate([o[0][k] for k in keys]) for o in outs],
                      [np.concatenate([o[1][k] for k in keys]) for o in outs])
    per_dir = {k: fidelity([o[0][k] for o in outs], [o[1][k] for o in outs])[1] for k in keys}
    return FidelityReport(spec, pooled[1], pooled[0], [o[2] for o in outs], per_dir)


def mask_temporal_parity(params: AsyrecParams, dataset: Dataset, spec: MaskSpec) -> FidelityReport:
    if spec.kind != "temporal_parity":
        raise ValueError(f"expected a temporal_parity spec, got {spec.kind}")
    return run_mask([(params, dataset)], spec)


def mask_modality_edge(params: AsyrecParams, dataset: Dataset, pair: str, renormalize: bool = True,
                       seed: int = 0) -> FidelityReport:
    return run_mask([(params, dataset)], MaskSpec("modality_edge", pair=pair, seed=seed, renormalize=renormalize))


def mask_segment(params: AsyrecParams, dataset: Dataset, spec: MaskSpec) -> FidelityReport:
    if spec.kind != "segment":
        raise ValueError(f"expected a segment spec, got {spec.kind}")
    return run_mask([(params, dataset)], spec)


# ------------------------------------------------------------------ grids and CSV

def grid(kind: str, seed: int = 0) -> list[MaskSpec]:
    """The full condition grid of one mask kind."""
    if kind in ("no_node_att", "no_edge_att"):
        return [MaskSpec(kind, seed=seed)]
    if kind == "temporal_parity":
        return [MaskSpec(kind, parity=p, ratio=r, seed=seed) for p in PARITIES for r in PARITY_RATIOS]
    if kind == "modality_edge":
        return [MaskSpec(kind, pair=p, seed=seed) for p in PAIR_LABELS]
    if kind == "segment":
        return [MaskSpec(kind, ratio=r, region=g, seed=seed) for g in REGIONS for r in SEGMENT_RATIOS]
    raise ValueError(f"unknown mask kind {kind!r}; valid kinds: {', '.join(KINDS)}")


def smoke_spec(kind: str, seed: int = 0) -> MaskSpec | None:
    """Ratio-0 condition for the kinds that take a ratio."""
    if kind == "temporal_parity":
        return MaskSpec(kind, parity="even", ratio=0.0, seed=seed)
    if kind == "segment":
        return MaskSpec(kind, ratio=0.0, region="beginning", seed=seed)
    return None


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return format(x, ".10g")
    return str(x)


def csv_rows(report: FidelityReport, fold_ids: Sequence[int | str] | None = None) -> list[str]:
    """One row per fold, then a ``mean`` row."""
    s = report.spec
    head = [s.kind, s.parity, s.ratio, s.pair, s.region, s.seed]
    ids = list(fold_ids) if fold_ids is not None else list(range(len(report.per_fold)))
    dirs = report.per_direction
    rows = []
    for k, fid in enumerate(ids):
        vals = head + [fid, report.per_fold[k], report.uar[k],
                       dirs["i->j"][k], dirs["j->i"][k] if "j->i" in dirs else None]
        rows.append(",".join(_fmt(v) for v in vals))
    tail = head + ["mean", report.dF, float(np.mean(report.uar)), report.direction_dF("i->j"),
                   report.direction_dF("j->i") if "j->i" in dirs else None]
    rows.append(",".join(_fmt(v) for v in tail))
    return rows
