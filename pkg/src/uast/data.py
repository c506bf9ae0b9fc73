"""Toy domain-shift datasets and the CSV dataset format."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConsistencyError, ParameterError, ParseError
from .model import UNLABELED, Dataset
from .numerics import SeededRng

KINDS = ("two_moons", "blobs")

# centre of the raw two-moons layout; subtracted so rotations act about the data centre
_MOONS_CENTER = np.array([0.5, 0.25])


def _two_moons(n: int, noise: float, rng: SeededRng):
    n_outer = (n + 1) // 2
    labels = np.r_[np.zeros(n_outer, dtype=np.int64), np.ones(n - n_outer, dtype=np.int64)]
    t = math.pi * rng.uniform(n)
    x = np.where(labels == 0, np.cos(t), 1.0 - np.cos(t))
    y = np.where(labels == 0, np.sin(t), 0.5 - np.sin(t))
    pts = np.column_stack([x, y]) - _MOONS_CENTER
    if noise > 0:
        pts = pts + noise * rng.normal(pts.shape)
    perm = rng.permutation(n)
    return pts[perm], labels[perm]


def _blob_centers(n_classes: int, dim: int, radius: float) -> np.ndarray:
    centers = np.zeros((n_classes, dim))
    if n_classes <= dim:
        centers[np.arange(n_classes), np.arange(n_classes)] = radius
    else:
        angles = 2.0 * math.pi * np.arange(n_classes) / n_classes
        centers[:, 0] = radius * np.cos(angles)
        centers[:, 1] = radius * np.sin(angles)
    return centers


def _blobs(n: int, noise: float, rng: SeededRng, n_classes: int = 2, dim: int = 2, radius: float = 2.0):
    labels = np.arange(n, dtype=np.int64) % n_classes
    pts = _blob_centers(n_classes, dim, radius)[labels]
    if noise > 0:
        pts = pts + noise * rng.normal(pts.shape)
    perm = rng.permutation(n)
    return pts[perm], labels[perm]


def draw_domain(kind: str, n: int, noise: float, rng: SeededRng, n_classes: int = 2, dim: int = 2):
    """Raw (untransformed) draw of ``n`` points from the named generator."""
    if kind == "two_moons":
        if n_classes != 2 or dim != 2:
            raise ParameterError("two_moons has exactly 2 classes in 2 dimensions")
        return _two_moons(n, noise, rng)
    if kind == "blobs":
        return _blobs(n, noise, rng, n_classes, dim)
    raise ParameterError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")


def apply_shift(points, rotation: float = 0.0, translation: Optional[Sequence[float]] = None) -> np.ndarray:
    """Rotate the first two coordinates by ``rotation`` degrees about the origin, then translate."""
    pts = np.array(points, dtype=np.float64)
    if rotation:
        a = math.radians(rotation)
        c, s = math.cos(a), math.sin(a)
        x, y = pts[:, 0].copy(), pts[:, 1].copy()
        pts[:, 0] = c * x - s * y
        pts[:, 1] = s * x + c * y
    if translation is not None:
        t = np.asarray(translation, dtype=np.float64)
        if t.shape != (pts.shape[1],):
            raise ParameterError(f"translation needs {pts.shape[1]} components, got {t.shape}")
        pts = pts + t
    return pts


def gen_synthetic(
    kind: str = "two_moons",
    n_source: int = 500,
    n_target: int = 500,
    rotation: float = 0.0,
    translation: Optional[Sequence[float]] = None,
    noise: float = 0.1,
    seed: int = 0,
    n_classes: int = 2,
    dim: int = 2,
) -> tuple:
    """Labeled source, unlabeled target and labeled target test sets.

    The target generator is the source generator followed by the shift.
    Streams: source ``split(0)``, unlabeled target ``split(1)``, test ``split(2)``.
    """
    if kind not in KINDS:
        raise ParameterError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")
    if n_source < 4 or n_target < 4:
        raise ParameterError("n_source and n_target must be at least 4")
    if noise < 0:
        raise ParameterError(f"noise must be non-negative, got {noise}")
    rng = SeededRng(seed)
    xs, ys = draw_domain(kind, n_source, noise, rng.split(0), n_classes, dim)
    xt, yt = draw_domain(kind, n_target, noise, rng.split(1), n_classes, dim)
    xe, ye = draw_domain(kind, n_target, noise, rng.split(2), n_classes, dim)
    labeled = Dataset(xs, ys, n_classes)
    unlabeled = Dataset(apply_shift(xt, rotation, translation), np.full(n_target, UNLABELED), n_classes)
    test = Dataset(apply_shift(xe, rotation, translation), ye, n_classes)
    return labeled, unlabeled, test


@dataclass
class DomainData:
    """Labeled source rows, unlabeled target rows and an optional labeled target test set."""

    labeled: Dataset
    unlabeled: Dataset
    test: Optional[Dataset] = None

    @property
    def class_count(self) -> int:
        return self.labeled.class_count


# -- CSV --------------------------------------------------------------------------


def write_csv(data: Dataset, path, include_labels: bool = True) -> None:
    """Header ``f0..f{d-1}[,label]``; values with 17 significant digits; -1 marks unlabeled."""
    d = data.features.shape[1]
    header = [f"f{i}" for i in range(d)] + (["label"] if include_labels else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row, label in zip(data.features, data.labels):
            fields = ["%.17g" % v for v in row]
            if include_labels:
                fields.append(str(int(label)))
            w.writerow(fields)


def load_csv(path, class_count: Optional[int] = None) -> Dataset:
    """Read a CSV dataset.

    Without ``class_count`` the class count is ``1 + max label`` (0 for a
    fully unlabeled file).
    """
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path}: empty file", line=1)
    header = [h.strip() for h in rows[0]]
    has_label = bool(header) and header[-1] == "label"
    feat_cols = header[:-1] if has_label else header
    if not feat_cols or feat_cols != [f"f{i}" for i in range(len(feat_cols))]:
        raise ParseError(f"{path}: header must be f0..f{{d-1}} with an optional label column", line=1)
    d = len(feat_cols)
    width = d + (1 if has_label else 0)
    feats = np.empty((len(rows) - 1, d))
    labels = np.full(len(rows) - 1, UNLABELED, dtype=np.int64)
    for i, row in enumerate(rows[1:]):
        line = i + 2
        if len(row) != width:
            raise ParseError(f"{path}: expected {width} fields, got {len(row)}", line=line)
        try:
            feats[i] = [float(v) for v in row[:d]]
        except ValueError as exc:
            raise ParseError(f"{path}: non-numeric feature ({exc})", line=line) from None
        if not np.all(np.isfinite(feats[i])):
            raise ParseError(f"{path}: non-finite feature", line=line)
        if has_label:
            try:
                labels[i] = int(row[d])
            except ValueError:
                raise ParseError(f"{path}: label {row[d]!r} is not an integer", line=line) from None
            if labels[i] < UNLABELED:
                raise ParseError(f"{path}: label {labels[i]} below -1", line=line)
    inferred = int(labels.max()) + 1 if len(labels) else 0
    if class_count is None:
        class_count = max(inferred, 0)
    elif inferred > class_count:
        raise ConsistencyError(f"{path}: label {inferred - 1} but only {class_count} classes declared")
    return Dataset(feats, labels, class_count)


def load_splits(labeled, unlabeled, test=None, class_count: Optional[int] = None):
    """Load the three CSV splits with one shared class count."""
    parts = [load_csv(p) if p is not None else None for p in (labeled, unlabeled, test)]
    if class_count is None:
        class_count = max(p.class_count for p in parts if p is not None)
    parts = [None if p is None else Dataset(p.features, p.labels, class_count) for p in parts]
    lab, unl, tst = parts
    dims = {p.features.shape[1] for p in parts if p is not None}
    if len(dims) != 1:
        raise ConsistencyError(f"splits disagree on feature count: {sorted(dims)}")
    # only labeled rows of the labeled file count as source; its unlabeled rows join the target pool
    unl = Dataset(
        np.vstack([unl.features, lab.unlabeled().features]),
        np.full(len(unl) + len(lab.unlabeled()), UNLABELED),
        class_count,
    )
    return DomainData(lab.labeled(), unl, tst)
