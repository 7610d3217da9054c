"""Multi-omics tables: CSV ingest, synthetic generation, semi-supervised splits."""
from __future__ import annotations

import csv
import hashlib
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import AlignmentError, FormatError, ParameterError, ParseError, SpecError, StratificationError


@dataclass(frozen=True)
class OmicsView:
    modality_id: str
    features: np.ndarray
    feature_names: tuple

    @property
    def width(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class MultiOmicsDataset:
    views: tuple
    labels: np.ndarray
    class_count: int
    sample_ids: tuple
    class_names: tuple = ()

    def __post_init__(self):
        if not self.views:
            raise FormatError("dataset needs at least one view")
        n = len(self.sample_ids)
        for v in self.views:
            if v.features.shape[0] != n:
                raise FormatError(f"view {v.modality_id!r} has {v.features.shape[0]} rows, expected {n}")
        if self.labels.shape != (n,):
            raise FormatError("labels must be a length-N vector")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise FormatError("label index out of range")
        missing = set(range(self.class_count)) - set(self.labels.tolist())
        if missing:
            raise FormatError(f"classes without samples: {sorted(missing)}")

    @property
    def n_samples(self) -> int:
        return len(self.sample_ids)

    @property
    def widths(self) -> tuple:
        return tuple(v.width for v in self.views)

    def digest(self) -> str:
        """Content hash over ids, labels and raw feature bytes (view names excluded)."""
        h = hashlib.sha256()
        for sid in self.sample_ids:
            h.update(sid.encode() + b"\0")
        h.update(self.labels.astype("<i8").tobytes())
        for v in self.views:
            h.update(np.array(v.features.shape, dtype="<i8").tobytes())
            h.update(np.ascontiguousarray(v.features, dtype="<f8").tobytes())
        return h.hexdigest()

    def permuted(self, order) -> "MultiOmicsDataset":
        order = np.asarray(order)
        views = tuple(OmicsView(v.modality_id, v.features[order], v.feature_names) for v in self.views)
        return MultiOmicsDataset(views, self.labels[order], self.class_count,
                                 tuple(self.sample_ids[i] for i in order), self.class_names)


@dataclass(frozen=True)
class LabelMask:
    train_indices: np.ndarray
    test_indices: np.ndarray
    seed: int

    def train_flags(self, n: int) -> np.ndarray:
        flags = np.zeros(n, dtype=bool)
        flags[self.train_indices] = True
        return flags


@dataclass(frozen=True)
class SynthSpec:
    n: int
    m: int
    c: int
    dims: tuple = ()
    cluster_separation: float = 5.0
    noise_sigma: float = 1.0
    seed: int = 0

    def validate(self):
        if self.c < 1 or self.m < 1:
            raise SpecError("need at least one class and one modality")
        if self.n < self.c:
            raise SpecError(f"N={self.n} is smaller than the class count c={self.c}")
        if len(self.dims) != self.m:
            raise SpecError(f"dims has {len(self.dims)} entries for {self.m} modalities")
        if any(d < 1 for d in self.dims):
            raise SpecError("every feature width must be >= 1")
        if self.noise_sigma < 0:
            raise SpecError("noise_sigma must be >= 0")


# -- CSV ----------------------------------------------------------------------

def _parse_cell(text: str, row: int, col: int, path) -> float:
    s = text.strip()
    try:
        value = float(s)
    except ValueError:
        try:
            value = float.fromhex(s)
        except (ValueError, OverflowError):
            raise ParseError(f"{path}: non-numeric cell {text!r} at row {row}, column {col}",
                             row=row, column=col) from None
    if not math.isfinite(value):
        raise ParseError(f"{path}: non-finite cell {text!r} at row {row}, column {col}", row=row, column=col)
    return value


def read_view_csv(path, modality_id=None) -> tuple:
    """Return ``(sample_ids, OmicsView)`` for one view file.

    Parse errors report 1-based file coordinates (line, column).
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        if len(header) < 2:
            raise FormatError(f"{path}: header needs sample_id plus at least one feature")
        ids, rows, seen = [], [], set()
        for r, record in enumerate(reader, start=2):
            if not record:
                continue
            if len(record) != len(header):
                raise FormatError(f"{path}: row {r} has {len(record)} cells, header has {len(header)}")
            sid = record[0]
            if sid in seen:
                raise FormatError(f"{path}: duplicate sample id {sid!r}")
            seen.add(sid)
            ids.append(sid)
            rows.append([_parse_cell(cell, r, c, path) for c, cell in enumerate(record[1:], start=2)])
    features = np.array(rows, dtype=np.float64).reshape(len(rows), len(header) - 1)
    view = OmicsView(modality_id or path.stem, features, tuple(header[1:]))
    return ids, view


def read_labels_csv(path) -> tuple:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) != 2:
            raise FormatError(f"{path}: expected header 'sample_id,label'")
        ids, names, seen = [], [], set()
        for r, record in enumerate(reader, start=2):
            if not record:
                continue
            if len(record) != 2:
                raise FormatError(f"{path}: row {r} must have two cells")
            if record[0] in seen:
                raise FormatError(f"{path}: duplicate sample id {record[0]!r}")
            seen.add(record[0])
            ids.append(record[0])
            names.append(record[1])
    return ids, names


def zscore_columns(X: np.ndarray) -> np.ndarray:
    """Per-column standardization; constant columns are centred only."""
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    return (X - mu) / sd


def load_dataset(view_paths: Sequence, label_path, zscore: bool = False) -> MultiOmicsDataset:
    """Assemble a dataset in the label file's sample order.

    Class indices follow first appearance in the label file.
    """
    if not view_paths:
        raise FormatError("at least one view file is required")
    label_ids, names = read_labels_csv(label_path)
    class_names = list(dict.fromkeys(names))
    lookup = {name: i for i, name in enumerate(class_names)}
    labels = np.array([lookup[n] for n in names], dtype=np.int64)

    views = []
    for m, vp in enumerate(view_paths):
        ids, view = read_view_csv(vp)
        position = {sid: i for i, sid in enumerate(ids)}
        missing = [sid for sid in label_ids if sid not in position]
        if missing:
            raise AlignmentError(f"{vp}: missing sample ids {missing}", missing=missing)
        extra = sorted(set(ids) - set(label_ids))
        if extra:
            raise AlignmentError(f"{vp}: sample ids absent from the label file {extra}", missing=extra)
        order = [position[sid] for sid in label_ids]
        X = view.features[order]
        if zscore:
            X = zscore_columns(X)
        views.append(OmicsView(view.modality_id, X, view.feature_names))
    return MultiOmicsDataset(tuple(views), labels, len(class_names), tuple(label_ids), tuple(class_names))


def _atomic_write_text(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _csv_text(rows) -> str:
    import io
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def save_dataset(dataset: MultiOmicsDataset, out_dir, prefix="synth") -> tuple:
    """Write view CSVs (hexfloat cells) plus ``labels.csv``; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    view_paths = []
    for v in dataset.views:
        rows = [("sample_id",) + tuple(v.feature_names)]
        rows += [(sid,) + tuple(float(x).hex() for x in row) for sid, row in zip(dataset.sample_ids, v.features)]
        p = out / f"{prefix}_{v.modality_id}.csv"
        _atomic_write_text(p, _csv_text(rows))
        view_paths.append(p)
    names = dataset.class_names or tuple(f"class{i}" for i in range(dataset.class_count))
    rows = [("sample_id", "label")] + [(sid, names[y]) for sid, y in zip(dataset.sample_ids, dataset.labels)]
    label_path = out / f"{prefix}_labels.csv"
    _atomic_write_text(label_path, _csv_text(rows))
    return view_paths, label_path


save_synthetic = save_dataset


# -- synthetic data -----------------------------------------------------------

def synth_generate(spec: SynthSpec) -> MultiOmicsDataset:
    """Gaussian clusters around seeded per-modality centroids.

    Classes are balanced up to one sample and renumbered by first appearance,
    so a save/load round trip reproduces the label vector as well.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    raw = rng.permutation(np.arange(spec.n) % spec.c)
    _, first = np.unique(raw, return_index=True)
    rank = np.empty(spec.c, dtype=np.int64)
    rank[np.argsort(first)] = np.arange(spec.c)
    labels = rank[raw]
    views = []
    for m, dim in enumerate(spec.dims):
        centroids = spec.cluster_separation * rng.standard_normal((spec.c, dim))
        noise = rng.standard_normal((spec.n, dim))
        X = centroids[labels] + spec.noise_sigma * noise
        views.append(OmicsView(f"view{m}", X, tuple(f"v{m}_f{j}" for j in range(dim))))
    width = len(str(spec.n - 1))
    ids = tuple(f"s{i:0{width}d}" for i in range(spec.n))
    return MultiOmicsDataset(tuple(views), labels, spec.c, ids, tuple(f"class{i}" for i in range(spec.c)))


# -- splits -------------------------------------------------------------------

def split_semi_supervised(dataset: MultiOmicsDataset, label_ratio: float, seed: int) -> LabelMask:
    """Stratified split: ``ceil(label_ratio * N_class)`` labeled samples per class."""
    if not 0.0 < label_ratio < 1.0:
        raise ParameterError(f"label_ratio must lie in (0, 1), got {label_ratio}")
    labels = np.asarray(dataset.labels)
    rng = np.random.default_rng(seed)
    train = []
    for cls in range(dataset.class_count):
        members = np.flatnonzero(labels == cls)
        # the epsilon stops 0.1 * 30 = 3.0000000000000004 from rounding up to 4
        k = math.ceil(label_ratio * len(members) - 1e-9)
        if k < 1:
            raise StratificationError(f"class {cls} has no sample to label")
        train.extend(rng.permutation(members)[:k].tolist())
    train = np.array(sorted(train), dtype=np.int64)
    test = np.setdiff1d(np.arange(len(labels)), train)
    return LabelMask(train, test, seed)
