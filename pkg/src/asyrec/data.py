"""Dyadic clip datasets: schema, file format, synthetic generator, splits."""
from __future__ import annotations

import math
import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .graph import MODALITIES

FORMAT_TAG = "#asyrec-features v1"


class DatasetError(ValueError):
    """Malformed or inconsistent dataset content."""


@dataclass(frozen=True)
class LabelSchema:
    name: str
    classes: tuple[str, ...]
    bidirectional: bool

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def index(self, label: str) -> int:
        try:
            return self.classes.index(label)
        except ValueError:
            raise DatasetError(f"label {label!r} not in schema {self.name} {self.classes}") from None


NOXI = LabelSchema("noxi", ("Str", "Acq", "Fri", "Vgf"), True)
UDIVA = LabelSchema("udiva", ("Kno", "Unk"), False)
LEVELS = {
    "I": LabelSchema("noxi-level1", ("Unknown", "Known"), True),
    "II": LabelSchema("noxi-level2", ("Acq", "Fri"), True),
    "III": LabelSchema("noxi-level3", ("Fri", "Vgf"), True),
}
SCHEMAS = {s.name: s for s in (NOXI, UDIVA, *LEVELS.values())}


def get_schema(name: str) -> LabelSchema:
    """Registered schema, or ``synth<C>`` / ``synth<C>u`` for generic class sets."""
    if name in SCHEMAS:
        return SCHEMAS[name]
    m = re.fullmatch(r"synth(\d+)(u?)", name)
    if m and int(m.group(1)) >= 2:
        c = int(m.group(1))
        return LabelSchema(name, tuple(f"c{k}" for k in range(c)), not m.group(2))
    raise DatasetError(f"unknown schema {name!r}")


@dataclass
class ModalityBundle:
    face: np.ndarray
    body: np.ndarray
    audio: np.ndarray
    text: np.ndarray

    @classmethod
    def from_array(cls, rows: np.ndarray) -> "ModalityBundle":
        return cls(*(np.asarray(r) for r in rows))

    def as_array(self) -> np.ndarray:
        vecs = [np.asarray(v, dtype=np.float64) for v in (self.face, self.body, self.audio, self.text)]
        if len({v.shape for v in vecs}) != 1 or vecs[0].ndim != 1:
            raise DatasetError(f"modality vectors must share one dimension, got {[v.shape for v in vecs]}")
        return np.stack(vecs)


@dataclass
class ClipRecord:
    dyad_id: str
    clip_index: int
    person_i: ModalityBundle
    person_j: ModalityBundle
    label_i_to_j: int
    label_j_to_i: int | None = None
    n_clips: int | None = None


@dataclass
class Dyad:
    """All clips of one dyad: ``features`` is ``(n, 2, 4, d)`` (clip, person, modality, dim)."""

    features: np.ndarray
    label_i_to_j: int
    label_j_to_i: int | None

    @property
    def n_clips(self) -> int:
        return self.features.shape[0]


@dataclass
class Dataset:
    schema: LabelSchema
    feature_dim: int
    dyads: dict[str, Dyad] = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.dyads)

    @property
    def n_clips(self) -> int:
        return sum(d.n_clips for d in self.dyads.values())

    def add_dyad(self, dyad_id: str, features: np.ndarray, label_i_to_j: int,
                 label_j_to_i: int | None = None) -> None:
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 4 or features.shape[1:] != (2, len(MODALITIES), self.feature_dim):
            raise DatasetError(f"dyad {dyad_id}: features shape {features.shape}, "
                               f"expected (n, 2, 4, {self.feature_dim})")
        if features.shape[0] < 1:
            raise DatasetError(f"dyad {dyad_id} has no clips")
        self._check_label(label_i_to_j)
        if self.schema.bidirectional:
            if label_j_to_i is None:
                raise DatasetError(f"dyad {dyad_id}: schema {self.schema.name} needs label_j_to_i")
            self._check_label(label_j_to_i)
        self.dyads[dyad_id] = Dyad(features, int(label_i_to_j),
                                   None if label_j_to_i is None else int(label_j_to_i))

    def _check_label(self, y) -> None:
        if not 0 <= int(y) < self.schema.n_classes:
            raise DatasetError(f"label {y} outside schema {self.schema.name}")

    def clips(self, dyad_id: str | None = None) -> Iterator[ClipRecord]:
        ids = self.dyads if dyad_id is None else [dyad_id]
        for did in ids:
            dy = self.dyads[did]
            for t in range(dy.n_clips):
                yield ClipRecord(did, t, ModalityBundle.from_array(dy.features[t, 0]),
                                 ModalityBundle.from_array(dy.features[t, 1]),
                                 dy.label_i_to_j, dy.label_j_to_i, dy.n_clips)

    def subset(self, ids: Iterable[str]) -> "Dataset":
        out = Dataset(self.schema, self.feature_dim)
        for did in ids:
            out.dyads[did] = self.dyads[did]
        return out

    def arrays(self) -> "ClipArrays":
        """Stack every clip for batched computation (dyad insertion order)."""
        feats, t, tmax, yi, yj, owner = [], [], [], [], [], []
        for k, dy in enumerate(self.dyads.values()):
            n = dy.n_clips
            feats.append(dy.features)
            t.append(np.arange(n))
            tmax.append(np.full(n, max(n - 1, 1)))
            yi.append(np.full(n, dy.label_i_to_j))
            yj.append(np.full(n, -1 if dy.label_j_to_i is None else dy.label_j_to_i))
            owner.append(np.full(n, k))
        if not feats:
            d = self.feature_dim
            return ClipArrays(np.zeros((0, 2, 4, d)), *(np.zeros(0, dtype=np.int64) for _ in range(5)))
        return ClipArrays(np.concatenate(feats), np.concatenate(t), np.concatenate(tmax),
                          np.concatenate(yi), np.concatenate(yj), np.concatenate(owner))

    def class_counts(self) -> dict[str, dict[str, tuple[int, int]]]:
        """Per direction and class: (dyads, clips), the layout of a data table."""
        out = {}
        dirs = [("i->j", "label_i_to_j")] + ([("j->i", "label_j_to_i")] if self.schema.bidirectional else [])
        for name, attr in dirs:
            counts = {c: [0, 0] for c in self.schema.classes}
            for dy in self.dyads.values():
                c = self.schema.classes[getattr(dy, attr)]
                counts[c][0] += 1
                counts[c][1] += dy.n_clips
            out[name] = {c: (v[0], v[1]) for c, v in counts.items()}
        return out


@dataclass
class ClipArrays:
    x: np.ndarray      # (N, 2, 4, d)
    t: np.ndarray      # clip index
    t_max: np.ndarray  # largest clip index of the clip's video
    y_ij: np.ndarray
    y_ji: np.ndarray   # -1 when absent
    dyad: np.ndarray   # position of the owning dyad

    def __len__(self) -> int:
        return self.t.shape[0]

    def take(self, idx) -> "ClipArrays":
        return ClipArrays(self.x[idx], self.t[idx], self.t_max[idx], self.y_ij[idx],
                          self.y_ji[idx], self.dyad[idx])


# ------------------------------------------------------------------ segmentation

def segment_indices(duration: float, n: int) -> list[tuple[float, float]]:
    """``n`` back-to-back intervals of width ``duration / n`` covering ``[0, duration]``."""
    if n < 1:
        raise ValueError(f"clip count must be >= 1, got {n}")
    if not duration > 0:
        raise ValueError(f"duration must be positive, got {duration}")
    step = duration / n
    edges = [k * step for k in range(n)] + [float(duration)]
    return list(zip(edges[:-1], edges[1:]))


# ------------------------------------------------------------------ file format

def _fmt(v: float) -> str:
    return format(float(v), ".9g")


def header_tokens(meta) -> str:
    if not meta:
        return ""
    for k, v in meta.items():
        if any(c.isspace() for c in f"{k}{v}") or "=" in str(k):
            raise ValueError(f"header token {k}={v!r} must not contain whitespace")
    return "".join(f" {k}={v}" for k, v in meta.items())


def dumps(ds: Dataset, meta: dict | None = None) -> str:
    """Canonical text form; ``meta`` adds ``key=value`` tokens to the header."""
    lines = [f"{FORMAT_TAG} d={ds.feature_dim} schema={ds.schema.name}{header_tokens(meta)}"]
    cls = ds.schema.classes
    for did, dy in ds.dyads.items():
        lj = "-" if dy.label_j_to_i is None else cls[dy.label_j_to_i]
        for t in range(dy.n_clips):
            vecs = [",".join(_fmt(v) for v in dy.features[t, p, m])
                    for p in range(2) for m in range(len(MODALITIES))]
            lines.append("\t".join([did, str(dy.n_clips), str(t), cls[dy.label_i_to_j], lj, *vecs]))
    return "\n".join(lines) + "\n"


def atomic_write(path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_dataset(ds: Dataset, path, meta: dict | None = None) -> None:
    atomic_write(path, dumps(ds, meta))


def loads(text: str) -> Dataset:
    lines = text.splitlines()
    if not lines or not lines[0].startswith(FORMAT_TAG):
        raise DatasetError(f"line 1: missing header {FORMAT_TAG!r}")
    head = dict(tok.split("=", 1) for tok in lines[0][len(FORMAT_TAG):].split() if "=" in tok)
    try:
        schema = get_schema(head["schema"])
        d_decl = int(head["d"]) if "d" in head else None
    except (KeyError, ValueError) as exc:
        raise DatasetError(f"line 1: bad header ({exc})") from None

    d = d_decl
    rows: dict[str, list] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5 + 2 * len(MODALITIES):
            raise DatasetError(f"line {lineno}: expected {5 + 2 * len(MODALITIES)} tab-separated fields, got {len(parts)}")
        did, n_s, t_s, li, lj = parts[:5]
        try:
            n, t = int(n_s), int(t_s)
            vecs = [np.array([float(v) for v in p.split(",")]) for p in parts[5:]]
        except ValueError as exc:
            raise DatasetError(f"line {lineno}: {exc}") from None
        if d is None:
            d = vecs[0].size
        bad = [k for k, v in enumerate(vecs) if v.size != d]
        if bad:
            raise DatasetError(f"line {lineno}: vector {bad[0]} has length {vecs[bad[0]].size}, expected d={d}")
        if not 0 <= t < n:
            raise DatasetError(f"line {lineno}: clip index {t} outside 0..{n - 1}")
        try:
            yi = schema.index(li)
            yj = None if lj == "-" else schema.index(lj)
        except DatasetError as exc:
            raise DatasetError(f"line {lineno}: {exc}") from None
        entry = rows.setdefault(did, [n, yi, yj, {}, lineno])
        if entry[0] != n or entry[1] != yi or entry[2] != yj:
            raise DatasetError(f"line {lineno}: dyad {did} changes clip count or labels")
        if t in entry[3]:
            raise DatasetError(f"line {lineno}: duplicate clip {t} of dyad {did}")
        entry[3][t] = np.stack(vecs).reshape(2, len(MODALITIES), d)

    ds = Dataset(schema, d if d is not None else 0)
    for did, (n, yi, yj, clips, first) in rows.items():
        missing = [t for t in range(n) if t not in clips]
        if missing:
            raise DatasetError(f"line {first}: dyad {did} is missing clip index {missing[0]}")
        try:
            ds.add_dyad(did, np.stack([clips[t] for t in range(n)]), yi, yj)
        except DatasetError as exc:
            raise DatasetError(f"line {first}: {exc}") from None
    return ds


def load_dataset(path) -> Dataset:
    return loads(Path(path).read_text(encoding="utf-8"))


# ------------------------------------------------------------------ synthetic data

@dataclass
class SynthConfig:
    dim: int = 16
    n_classes: int = 4
    dyads_per_class: int = 24
    clips: int = 12
    noise: float = 0.05
    asymmetric: bool = True
    asym_fraction: float = 0.5
    bidirectional: bool = True


def synth_schema(cfg: SynthConfig) -> LabelSchema:
    if cfg.n_classes == 4 and cfg.bidirectional:
        return NOXI
    if cfg.n_classes == 2 and not cfg.bidirectional:
        return UDIVA
    return get_schema(f"synth{cfg.n_classes}{'' if cfg.bidirectional else 'u'}")


def class_bases(d: int, n_classes: int, seed: int) -> np.ndarray:
    """Orthonormal class directions per modality: ``(4, C, d)``."""
    if n_classes > d:
        raise ValueError(f"need dim >= classes for orthogonal bases, got d={d}, C={n_classes}")
    rng = np.random.default_rng([seed, 1])
    out = np.empty((len(MODALITIES), n_classes, d))
    for m in range(len(MODALITIES)):
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        out[m] = q[:, :n_classes].T
    return out


def class_frequency(c: int) -> int:
    return c % 4 + 1


def synth_generate(cfg: SynthConfig, seed: int) -> Dataset:
    """Seeded dyads whose labels are planted in cross-person modality pairs.

    See :func:`planted_term` for the construction of the discriminative signal.
    """
    if cfg.n_classes < 2:
        raise ValueError(f"need at least 2 classes (--classes >= 2), got {cfg.n_classes}")
    if cfg.dyads_per_class < 1 or cfg.clips < 2 or cfg.dim < 1:
        raise ValueError("dyads_per_class >= 1, clips >= 2 and dim >= 1 are required")
    if not 0.0 <= cfg.asym_fraction <= 1.0:
        raise ValueError(f"asym_fraction must lie in [0, 1], got {cfg.asym_fraction}")
    schema = synth_schema(cfg)
    C, d, n = cfg.n_classes, cfg.dim, cfg.clips
    bases = class_bases(d, C, seed)
    rng = np.random.default_rng([seed, 2])

    labels_i = np.repeat(np.arange(C), cfg.dyads_per_class)
    n_dyads = labels_i.size
    labels_j = labels_i.copy()
    if cfg.asymmetric:
        n_asym = int(math.floor(cfg.asym_fraction * n_dyads + 0.5))
        flip = rng.permutation(n_dyads)[:n_asym]
        labels_j[flip] = (labels_i[flip] + rng.integers(1, C, size=n_asym)) % C

    ds = Dataset(schema, d)
    width = len(str(n_dyads - 1))
    for k in range(n_dyads):
        ci, cj = int(labels_i[k]), int(labels_j[k])
        feats = _synth_dyad(bases, ci, cj, n, cfg.noise, rng)
        ds.add_dyad(f"dyad{k:0{width}d}", feats, ci, cj if cfg.bidirectional else None)
    return ds


# (receiving person, modality), (carrying person, modality) per direction
PLANT_IJ = ((0, 0), (1, 2))  # i.face <- j.audio
PLANT_JI = ((1, 2), (0, 0))  # j.audio <- i.face


def _synth_dyad(bases, ci, cj, n, noise, rng) -> np.ndarray:
    """One dyad: the carrier row holds the true class direction, the carrying
    person's other rows hold directions of random classes (decoys), and the
    whole person is scaled by the class envelope."""
    C, d = bases.shape[1], bases.shape[2]
    t = np.arange(n)
    feats = np.empty((n, 2, len(MODALITIES), d))
    for (_, (who, row)), c in ((PLANT_IJ, ci), (PLANT_JI, cj)):
        amp = 1.0 + 0.5 * np.sin(2 * np.pi * class_frequency(c) * t / n)
        decoys = rng.integers(0, C, size=(n, len(MODALITIES)))
        decoys[:, row] = c
        feats[:, who] = bases[row][decoys] * amp[:, None, None]
    feats += noise * rng.standard_normal(feats.shape)
    return feats


def planted_term(features: np.ndarray, direction: str = "i->j") -> np.ndarray:
    """The row carrying a direction's class signal (``(..., d)``)."""
    _, (who, row) = PLANT_IJ if direction == "i->j" else PLANT_JI
    return features[..., who, row, :]


# ------------------------------------------------------------------ relabelling

_LEVEL_MAPS = {
    "I": {"Str": "Unknown", "Acq": "Known", "Fri": "Known", "Vgf": "Known"},
    "II": {"Acq": "Acq", "Fri": "Fri", "Vgf": "Fri"},
    "III": {"Fri": "Fri", "Vgf": "Vgf"},
}


def remap_hierarchical(ds: Dataset, level: str) -> Dataset:
    """Binary relabelling of a 4-class NoXi-schema dataset.

    A dyad is kept only when both of its direction labels survive the level's
    class filter; clip features are shared, not copied.
    """
    if ds.schema != NOXI:
        raise DatasetError(f"hierarchical levels need schema {NOXI.name}, got {ds.schema.name}")
    if level not in _LEVEL_MAPS:
        raise ValueError(f"level must be one of I, II, III, got {level!r}")
    mapping = _LEVEL_MAPS[level]
    target = LEVELS[level]
    out = Dataset(target, ds.feature_dim)
    src = NOXI.classes
    for did, dy in ds.dyads.items():
        a = mapping.get(src[dy.label_i_to_j])
        b = mapping.get(src[dy.label_j_to_i]) if dy.label_j_to_i is not None else None
        if a is None or b is None:
            continue
        out.dyads[did] = Dyad(dy.features, target.index(a), target.index(b))
    if not out.dyads:
        out.flags.append(f"empty: no dyad of {ds.schema.name} survives level {level}")
    return out


# ------------------------------------------------------------------ splits

def _strata(ds: Dataset, ids: Sequence[str]) -> dict[int, list[str]]:
    groups: dict[int, list[str]] = {}
    for did in ids:
        groups.setdefault(ds.dyads[did].label_i_to_j, []).append(did)
    return dict(sorted(groups.items()))


def kfold_split(ds: Dataset, k: int, seed: int) -> list[tuple[Dataset, Dataset]]:
    """Dyad-level folds stratified by the i->j label."""
    if k < 2:
        raise ValueError(f"K must be >= 2, got {k}")
    groups = _strata(ds, list(ds.dyads))
    for c, members in groups.items():
        if len(members) < k:
            raise DatasetError(f"class {ds.schema.classes[c]} has {len(members)} dyads, fewer than K={k}")
    rng = np.random.default_rng([seed, 3])
    fold_of: dict[str, int] = {}
    offset = 0
    for c, members in groups.items():
        order = rng.permutation(len(members))
        for rank, pos in enumerate(order):
            fold_of[members[pos]] = (rank + offset) % k
        offset += len(members)
    out = []
    for f in range(k):
        test = [d for d in ds.dyads if fold_of[d] == f]
        train = [d for d in ds.dyads if fold_of[d] != f]
        out.append((ds.subset(train), ds.subset(test)))
    return out


def stratified_holdout(ds: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Split off ``fraction`` of each class's dyads (at least one when a class has two or more)."""
    rng = np.random.default_rng([seed, 4])
    held: set[str] = set()
    for members in _strata(ds, list(ds.dyads)).values():
        m = int(math.floor(fraction * len(members) + 0.5))
        if len(members) >= 2:
            m = min(max(m, 1), len(members) - 1)
        else:
            m = 0
        held.update(members[p] for p in rng.permutation(len(members))[:m])
    keep = [d for d in ds.dyads if d not in held]
    return ds.subset(keep), ds.subset([d for d in ds.dyads if d in held])
