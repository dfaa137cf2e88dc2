"""Radiomic feature maps, datasets, on-disk formats and standardization."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

MISSING_LABEL = "NA"


class DatasetError(ValueError):
    """Raised when a dataset or one of its subject files is malformed."""


@dataclass(frozen=True)
class FeatureMap:
    """One subject's ``n_roi x n_features`` matrix. Rows are ROIs."""

    subject_id: str
    values: np.ndarray
    roi_ids: tuple[str, ...]
    feature_names: tuple[str, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "roi_ids", tuple(self.roi_ids))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        if values.ndim != 2:
            raise DatasetError(f"{self.subject_id}: expected a 2-D matrix, got shape {values.shape}")
        n_roi, n_feat = values.shape
        if n_roi < 2 or n_feat < 1:
            raise DatasetError(f"{self.subject_id}: need at least 2 ROIs and 1 feature, got {values.shape}")
        if len(self.roi_ids) != n_roi or len(self.feature_names) != n_feat:
            raise DatasetError(
                f"{self.subject_id}: labels ({len(self.roi_ids)} ROIs, {len(self.feature_names)} features) "
                f"do not match matrix shape {values.shape}"
            )
        if len(set(self.roi_ids)) != n_roi:
            raise DatasetError(f"{self.subject_id}: duplicate ROI ids")
        bad = np.argwhere(~np.isfinite(values))
        if bad.size:
            r, c = bad[0]
            raise DatasetError(
                f"{self.subject_id}: non-finite value at ROI {self.roi_ids[r]!r}, feature {self.feature_names[c]!r}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class Dataset:
    maps: tuple[FeatureMap, ...]
    labels: np.ndarray | None = None
    split_tags: tuple[str, ...] | None = None

    def __post_init__(self):
        maps = tuple(self.maps)
        object.__setattr__(self, "maps", maps)
        if not maps:
            raise DatasetError("empty dataset")
        first = maps[0]
        seen = set()
        for m in maps:
            if m.subject_id in seen:
                raise DatasetError(f"duplicate subject_id {m.subject_id!r}")
            seen.add(m.subject_id)
            if m.roi_ids != first.roi_ids:
                raise DatasetError(f"{m.subject_id}: ROI order differs from {first.subject_id}")
            if m.feature_names != first.feature_names:
                raise DatasetError(f"{m.subject_id}: feature names differ from {first.subject_id}")
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.float64)
            if labels.shape != (len(maps),):
                raise DatasetError(f"expected {len(maps)} labels, got shape {labels.shape}")
            object.__setattr__(self, "labels", labels)
        if self.split_tags is not None:
            tags = tuple(self.split_tags)
            if len(tags) != len(maps):
                raise DatasetError(f"expected {len(maps)} split tags, got {len(tags)}")
            object.__setattr__(self, "split_tags", tags)

    def __len__(self) -> int:
        return len(self.maps)

    @property
    def subject_ids(self) -> list[str]:
        return [m.subject_id for m in self.maps]

    @property
    def roi_ids(self) -> tuple[str, ...]:
        return self.maps[0].roi_ids

    @property
    def feature_names(self) -> tuple[str, ...]:
        return self.maps[0].feature_names

    @property
    def n_roi(self) -> int:
        return len(self.roi_ids)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def tensor(self) -> np.ndarray:
        """Stack all maps into an ``(M, n_roi, n_features)`` array."""
        return np.stack([m.values for m in self.maps])

    def subset(self, index: Sequence[int]) -> "Dataset":
        index = list(index)
        return Dataset(
            maps=tuple(self.maps[i] for i in index),
            labels=None if self.labels is None else self.labels[index],
            split_tags=None if self.split_tags is None else tuple(self.split_tags[i] for i in index),
        )

    def with_values(self, values: np.ndarray) -> "Dataset":
        maps = tuple(replace(m, values=v) for m, v in zip(self.maps, values))
        return Dataset(maps=maps, labels=self.labels, split_tags=self.split_tags)

    def is_binary(self) -> bool:
        return self.labels is not None and bool(np.all(np.isin(self.labels, (0.0, 1.0))))


def from_array(
    values: np.ndarray,
    labels: Sequence[float] | None = None,
    subject_ids: Sequence[str] | None = None,
    roi_ids: Sequence[str] | None = None,
    feature_names: Sequence[str] | None = None,
) -> Dataset:
    """Build a :class:`Dataset` from an ``(M, n_roi, n_features)`` array."""
    values = np.asarray(values, dtype=np.float64)
    m, n_roi, n_feat = values.shape
    subject_ids = subject_ids or [f"s{i:05d}" for i in range(m)]
    roi_ids = roi_ids or [f"roi{i:03d}" for i in range(n_roi)]
    feature_names = feature_names or [f"f{i:03d}" for i in range(n_feat)]
    maps = tuple(FeatureMap(s, v, roi_ids, feature_names) for s, v in zip(subject_ids, values))
    return Dataset(maps, labels=None if labels is None else np.asarray(labels, dtype=np.float64))


# -- on-disk format -----------------------------------------------------------


def read_matrix(path: str | os.PathLike, subject_id: str, delimiter: str = ",") -> FeatureMap:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{subject_id}: missing matrix file {path}")
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh, delimiter=delimiter) if r]
    if len(rows) < 2:
        raise DatasetError(f"{subject_id}: {path} has no ROI rows")
    # header may carry a leading label for the ROI column
    header = rows[0]
    n_feat = len(rows[1]) - 1
    if len(header) == n_feat + 1:
        header = header[1:]
    if len(header) != n_feat:
        raise DatasetError(f"{subject_id}: {path} header has {len(header)} names for {n_feat} value columns")
    roi_ids, values = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != n_feat + 1:
            raise DatasetError(f"{subject_id}: {path}:{lineno} has {len(row) - 1} values, expected {n_feat}")
        roi_ids.append(row[0].strip())
        try:
            values.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise DatasetError(f"{subject_id}: {path}:{lineno}: {exc}") from None
    return FeatureMap(subject_id, np.array(values), roi_ids, [h.strip() for h in header])


def write_matrix(fmap: FeatureMap, path: str | os.PathLike, delimiter: str = ",") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(["roi_id", *fmap.feature_names])
        for roi, row in zip(fmap.roi_ids, fmap.values):
            # repr gives the shortest string that round-trips a float64 exactly
            w.writerow([roi, *(repr(float(v)) for v in row)])


def load_dataset(manifest_path: str | os.PathLike, delimiter: str = ",") -> Dataset:
    """Read a manifest (``subject_id, label_or_NA, relative_path``) and its matrices."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DatasetError(f"missing manifest {manifest_path}")
    with open(manifest_path, newline="") as fh:
        rows = [r for r in csv.reader(fh, delimiter=delimiter) if r]
    if not rows:
        raise DatasetError("empty dataset")
    body = rows[1:]
    if not body:
        raise DatasetError("empty dataset")
    maps, labels = [], []
    for lineno, row in enumerate(body, start=2):
        if len(row) != 3:
            raise DatasetError(f"{manifest_path}:{lineno}: expected 3 columns, got {len(row)}")
        sid, label, rel = (c.strip() for c in row)
        fmap = read_matrix(manifest_path.parent / rel, sid, delimiter)
        if maps and fmap.shape != maps[0].shape:
            raise DatasetError(f"{sid}: shape {fmap.shape} differs from {maps[0].subject_id} {maps[0].shape}")
        maps.append(fmap)
        labels.append(math.nan if label.upper() == MISSING_LABEL else float(label))
    labels = np.array(labels)
    if np.all(np.isnan(labels)):
        labels = None
    elif np.any(np.isnan(labels)):
        missing = [m.subject_id for m, y in zip(maps, labels) if np.isnan(y)]
        raise DatasetError(f"labels missing for some subjects: {missing[:5]}")
    return Dataset(tuple(maps), labels=labels)


def save_dataset(d: Dataset, out_dir: str | os.PathLike, delimiter: str = ",") -> Path:
    """Write ``manifest.csv`` plus one matrix file per subject under ``out_dir/subjects``."""
    out_dir = Path(out_dir)
    (out_dir / "subjects").mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(["subject_id", "label", "path"])
        for i, fmap in enumerate(d.maps):
            rel = f"subjects/{fmap.subject_id}.csv"
            write_matrix(fmap, out_dir / rel, delimiter)
            if d.labels is None:
                label = MISSING_LABEL
            else:
                y = float(d.labels[i])
                label = str(int(y)) if y.is_integer() else repr(y)
            w.writerow([fmap.subject_id, label, rel])
    return manifest


# -- normalization ------------------------------------------------------------


@dataclass(frozen=True)
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray
    fitted_on: tuple[str, ...]
    warnings: tuple[str, ...] = field(default_factory=tuple)

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.mean) / self.std

    def transform(self, d: Dataset) -> Dataset:
        return d.with_values(self.apply(d.tensor()))


TEST_TAG = "test"


def fit_normalization(d: Dataset) -> NormalizationStats:
    """Per-(ROI, feature) mean and SD (ddof=0) over the non-test subjects of ``d``."""
    if d.split_tags is not None:
        keep = [i for i, t in enumerate(d.split_tags) if t != TEST_TAG]
    else:
        keep = list(range(len(d)))
    if len(keep) < 2:
        raise DatasetError("normalization needs at least 2 training subjects")
    x = d.tensor()[keep]
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    warnings = []
    flat = np.argwhere(~(std > 0))
    for r, c in flat:
        warnings.append(f"zero variance at ROI {d.roi_ids[r]!r}, feature {d.feature_names[c]!r}")
    if warnings:
        log.warning("%d zero-variance cells left centered without scaling", len(warnings))
    std = np.where(std > 0, std, 1.0)
    return NormalizationStats(mean, std, tuple(d.subject_ids[i] for i in keep), tuple(warnings))


def zscore_normalize(d: Dataset) -> tuple[Dataset, NormalizationStats]:
    stats = fit_normalization(d)
    return stats.transform(d), stats
