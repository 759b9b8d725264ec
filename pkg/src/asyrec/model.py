"""Per-clip classifier: graph knowledge + raw features + periodic time code."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import ClipArrays, ClipRecord, Dataset, LabelSchema, header_tokens, atomic_write, get_schema
from .graph import R, NeAgnParams, build_adjacency, ne_agn_layer
from .temporal import TemporalEncoderParams, periodic_encode
from .tensor import Tensor

CHECKPOINT_TAG = "#asyrec-checkpoint v1"


@dataclass
class Head:
    weight: Tensor  # (6d, C)
    bias: Tensor    # (C,)

    @classmethod
    def zeros(cls, fan_in: int, n_classes: int) -> "Head":
        return cls(Tensor(np.zeros((fan_in, n_classes)), requires_grad=True),
                   Tensor(np.zeros(n_classes), requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight) + self.bias


@dataclass
class AsyrecParams:
    graph: NeAgnParams
    temporal: TemporalEncoderParams
    head_ij: Head
    head_ji: Head | None
    schema: LabelSchema
    feature_mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    feature_std: np.ndarray = field(default_factory=lambda: np.zeros(0))
    aggregate: str = "counterpart"

    @classmethod
    def init(cls, d: int, schema: LabelSchema, seed: int = 0, *, d_proj: int | None = None,
             slope: float = 0.01, eps: float = 1e-8, aggregate: str = "counterpart") -> "AsyrecParams":
        rng = np.random.default_rng([seed, 11])
        C = schema.n_classes
        return cls(
            graph=NeAgnParams.init(d, rng, d_proj=d_proj, slope=slope),
            temporal=TemporalEncoderParams.init(d, rng, eps=eps),
            head_ij=Head.zeros(6 * d, C),
            head_ji=Head.zeros(6 * d, C) if schema.bidirectional else None,
            schema=schema,
            feature_mean=np.zeros((R, d)),
            feature_std=np.ones((R, d)),
            aggregate=aggregate,
        )

    @property
    def dim(self) -> int:
        return self.graph.omega.shape[-1]

    def named(self) -> dict[str, Tensor]:
        out = {**self.graph.tensors(), **self.temporal.tensors(),
               "head_ij.weight": self.head_ij.weight, "head_ij.bias": self.head_ij.bias}
        if self.head_ji is not None:
            out.update({"head_ji.weight": self.head_ji.weight, "head_ji.bias": self.head_ji.bias})
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named().values())

    def fit_standardizer(self, ds: Dataset) -> None:
        """Per modality and feature: mean and std over every clip of both persons."""
        x = ds.arrays().x  # (N, 2, 4, d)
        pooled = x.transpose(2, 0, 1, 3).reshape(R, -1, x.shape[-1])
        self.feature_mean = pooled.mean(axis=1)
        std = pooled.std(axis=1)
        self.feature_std = np.where(std > 1e-12, std, 1.0)

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.feature_mean) / self.feature_std

    def copy(self) -> "AsyrecParams":
        return from_state(self.state(), self.schema, self.aggregate)

    def state(self) -> dict[str, np.ndarray]:
        st = {k: v.data.copy() for k, v in self.named().items()}
        st["feature.mean"] = self.feature_mean.copy()
        st["feature.std"] = self.feature_std.copy()
        st["meta.slope"] = np.array([self.graph.slope])
        st["meta.eps"] = np.array([self.temporal.eps])
        return st


@dataclass
class ForwardOptions:
    """Inference-time switches used by the ablation variants."""

    node_att: bool = True
    edge_att: bool = True
    edge_mask: np.ndarray | None = None
    renormalize: bool = True
    time_keep: np.ndarray | None = None  # per clip, 0 zeroes the periodic code


@dataclass
class ClipPrediction:
    p_i_to_j: np.ndarray
    p_j_to_i: np.ndarray | None
    clip_index: int


def forward_batch(params: AsyrecParams, x: np.ndarray, t, t_max,
                  opts: ForwardOptions | None = None) -> tuple[Tensor, Tensor | None]:
    """Logits for a batch: ``x`` is raw ``(B, 2, 4, d)`` features."""
    opts = opts or ForwardOptions()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1:] != (2, R, params.dim):
        raise ValueError(f"features of shape {x.shape} do not match model dimension d={params.dim}")
    z = params.standardize(x)
    h_i, h_j = T.constant(z[:, 0]), T.constant(z[:, 1])
    g = ne_agn_layer(h_i, h_j, params.graph, build_adjacency(R),
                     node_att=opts.node_att, edge_att=opts.edge_att, edge_mask=opts.edge_mask,
                     renormalize=opts.renormalize, aggregate=params.aggregate)
    phi = periodic_encode(np.asarray(t), np.asarray(t_max), params.temporal)
    if opts.time_keep is not None:
        phi = phi * np.asarray(opts.time_keep, dtype=np.float64).reshape(-1, 1)
    B = x.shape[0]
    fm_i = T.reshape(h_i, (B, -1))
    fm_j = T.reshape(h_j, (B, -1))
    logit_ij = params.head_ij(T.concat([fm_i, g["fg_i"], phi], axis=1))
    logit_ji = None
    if params.head_ji is not None:
        logit_ji = params.head_ji(T.concat([fm_j, g["fg_j"], phi], axis=1))
    return logit_ij, logit_ji


def _probs(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_arrays(params: AsyrecParams, arr: ClipArrays, opts: ForwardOptions | None = None,
                   batch: int = 512) -> tuple[np.ndarray, np.ndarray | None]:
    """Probability arrays ``(N, C)`` per direction, computed without a tape."""
    out_ij, out_ji = [], []
    with T.no_grad():
        for s in range(0, len(arr), batch):
            sl = slice(s, s + batch)
            o = opts
            if opts is not None and opts.time_keep is not None:
                o = ForwardOptions(opts.node_att, opts.edge_att, opts.edge_mask,
                                   opts.renormalize, np.asarray(opts.time_keep)[sl])
            a, b = forward_batch(params, arr.x[sl], arr.t[sl], arr.t_max[sl], o)
            out_ij.append(_probs(a.data))
            if b is not None:
                out_ji.append(_probs(b.data))
    C = params.schema.n_classes
    p_ij = np.concatenate(out_ij) if out_ij else np.zeros((0, C))
    p_ji = (np.concatenate(out_ji) if out_ji else np.zeros((0, C))) if params.head_ji is not None else None
    return p_ij, p_ji


def forward(clip: ClipRecord, params: AsyrecParams, opts: ForwardOptions | None = None) -> ClipPrediction:
    x = np.stack([clip.person_i.as_array(), clip.person_j.as_array()])[None]
    n = clip.n_clips if clip.n_clips is not None else clip.clip_index + 1
    with T.no_grad():
        a, b = forward_batch(params, x, [clip.clip_index], [max(n - 1, 1)], opts)
    return ClipPrediction(_probs(a.data)[0], None if b is None else _probs(b.data)[0], clip.clip_index)


def loss(params: AsyrecParams, x: np.ndarray, t, t_max, y_ij, y_ji=None,
         opts: ForwardOptions | None = None) -> Tensor:
    """Batch-mean cross-entropy, summed over the two directions when bidirectional."""
    logit_ij, logit_ji = forward_batch(params, x, t, t_max, opts)
    total = T.cross_entropy(logit_ij, y_ij)
    if logit_ji is not None:
        if y_ji is None or np.any(np.asarray(y_ji) < 0):
            raise ValueError("bidirectional schema needs a j->i label for every clip")
        total = total + T.cross_entropy(logit_ji, y_ji)
    return total


def clip_loss(pred: ClipPrediction, clip: ClipRecord) -> float:
    """Cross-entropy of an already computed prediction against the clip's labels."""
    total = -float(np.log(pred.p_i_to_j[clip.label_i_to_j]))
    if pred.p_j_to_i is not None:
        if clip.label_j_to_i is None:
            raise ValueError(f"clip {clip.dyad_id}/{clip.clip_index} has no j->i label")
        total -= float(np.log(pred.p_j_to_i[clip.label_j_to_i]))
    return total


def predict_video(preds: Sequence[ClipPrediction]) -> tuple[np.ndarray, np.ndarray | None]:
    """Mean of clip distributions per direction; argmax of it is the video label."""
    if not preds:
        raise ValueError("predict_video needs at least one clip prediction")
    p_ij = np.mean([p.p_i_to_j for p in preds], axis=0)
    p_ji = None
    if preds[0].p_j_to_i is not None:
        p_ji = np.mean([p.p_j_to_i for p in preds], axis=0)
    return p_ij, p_ji


# ------------------------------------------------------------------ checkpoints

def dumps_checkpoint(params: AsyrecParams, meta: dict | None = None) -> str:
    """Text checkpoint; values are stored as ``float.hex`` so reloads are bit-exact."""
    lines = [f"{CHECKPOINT_TAG} schema={params.schema.name} aggregate={params.aggregate}{header_tokens(meta)}"]
    for name, arr in params.state().items():
        shape = "x".join(str(s) for s in arr.shape) or "scalar"
        vals = ",".join(float(v).hex() for v in arr.reshape(-1))
        lines.append(f"{name}\t{shape}\t{vals}")
    return "\n".join(lines) + "\n"


def save_checkpoint(params: AsyrecParams, path, meta: dict | None = None) -> None:
    atomic_write(path, dumps_checkpoint(params, meta))


def loads_checkpoint(text: str) -> AsyrecParams:
    lines = text.splitlines()
    if not lines or not lines[0].startswith(CHECKPOINT_TAG):
        raise ValueError(f"not a checkpoint: missing header {CHECKPOINT_TAG!r}")
    head = dict(tok.split("=", 1) for tok in lines[0][len(CHECKPOINT_TAG):].split())
    state: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            name, shape_s, vals = line.split("\t")
            shape = () if shape_s == "scalar" else tuple(int(s) for s in shape_s.split("x"))
            flat = np.array([float.fromhex(v) for v in vals.split(",")] if vals else [])
            state[name] = flat.reshape(shape)
        except ValueError as exc:
            raise ValueError(f"checkpoint line {lineno}: {exc}") from None
    return from_state(state, get_schema(head["schema"]), head.get("aggregate", "counterpart"))


def load_checkpoint(path) -> AsyrecParams:
    return loads_checkpoint(Path(path).read_text(encoding="utf-8"))


def from_state(state: dict[str, np.ndarray], schema: LabelSchema | None = None,
               aggregate: str | None = None) -> AsyrecParams:
    if schema is None:
        raise ValueError("schema required")
    t = lambda k: Tensor(state[k].copy(), requires_grad=True)  # noqa: E731
    bidir = "head_ji.weight" in state
    return AsyrecParams(
        graph=NeAgnParams(t("node.omega"), t("edge.proj"), t("edge.phi"), float(state["meta.slope"][0])),
        temporal=TemporalEncoderParams(t("time.weight"), t("time.bias"), float(state["meta.eps"][0])),
        head_ij=Head(t("head_ij.weight"), t("head_ij.bias")),
        head_ji=Head(t("head_ji.weight"), t("head_ji.bias")) if bidir else None,
        schema=schema,
        feature_mean=state["feature.mean"].copy(),
        feature_std=state["feature.std"].copy(),
        aggregate=aggregate or "counterpart",
    )
