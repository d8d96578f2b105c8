"""Voxel / BEV grid types, reshapes, label decoding and the mIoU metric.

Conventions used throughout the package:
  - Logits tensors are C-contiguous float32 with layout (H, W, Z, N): row-major
    with the class axis fastest, so the on-disk tile format is a straight memory
    dump.
  - Axis 0 of a grid indexes x, axis 1 indexes y, axis 2 indexes z; voxel
    (i, j, k) covers [p_min + (i,j,k)*v_size, p_min + (i+1,j+1,k+1)*v_size).
  - BEV ("height-to-channel") form folds (z, class) into a single channel axis
    of size Z*N with channel index z*N + c.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .validation import check_finite, check_positive

__all__ = [
    "GridSpec",
    "LogitsGrid",
    "LabelGrid",
    "FeatureGrid",
    "ClassPartition",
    "MiouResult",
    "height_to_channel",
    "channel_to_height",
    "decode_labels",
    "miou",
]


@dataclass(frozen=True)
class GridSpec:
    """Geometry of a voxel grid: origin corner, voxel pitch, dims and class layout."""

    p_min: tuple[float, float, float]
    v_size: float
    dims: tuple[int, int, int]
    n_classes: int
    l_free: int

    def __post_init__(self):
        object.__setattr__(self, "p_min", tuple(float(v) for v in self.p_min))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if len(self.p_min) != 3 or len(self.dims) != 3:
            raise ValueError("p_min and dims must have length 3")
        check_positive(self.v_size, "v_size")
        if any(d < 1 for d in self.dims):
            raise ValueError(f"dims must all be >= 1, got {self.dims}")
        if not 0 < self.n_classes:
            raise ValueError("n_classes must be >= 1")
        if not 0 <= self.l_free < self.n_classes:
            raise ValueError(f"l_free {self.l_free} outside [0, {self.n_classes})")

    @classmethod
    def benchmark(cls) -> "GridSpec":
        """80 m x 80 m x 6.4 m surround grid at 0.4 m pitch, 17 semantic classes + free."""
        return cls(p_min=(-40.0, -40.0, -1.0), v_size=0.4, dims=(200, 200, 16), n_classes=18, l_free=17)

    @classmethod
    def desk(cls) -> "GridSpec":
        """Small grid for fast tests and synthetic scenes; same class layout as benchmark()."""
        return cls(p_min=(-10.0, -10.0, -0.4), v_size=0.4, dims=(50, 50, 8), n_classes=18, l_free=17)

    @property
    def bev_channels(self) -> int:
        return self.dims[2] * self.n_classes

    def voxel_centers(self) -> np.ndarray:
        """(H, W, Z, 3) array of voxel center coordinates in the grid frame."""
        h, w, z = self.dims
        ii, jj, kk = np.meshgrid(np.arange(h), np.arange(w), np.arange(z), indexing="ij")
        idx = np.stack([ii, jj, kk], axis=-1).astype(np.float64)
        return np.asarray(self.p_min) + (idx + 0.5) * self.v_size

    def bev_centers(self) -> np.ndarray:
        """(H, W, 2) array of BEV cell center xy coordinates in the grid frame."""
        h, w, _ = self.dims
        ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        xy = np.stack([ii, jj], axis=-1).astype(np.float64)
        return np.asarray(self.p_min[:2]) + (xy + 0.5) * self.v_size


def _check_grid_values(spec: GridSpec, values, extra_shape: tuple, name: str, dtype) -> np.ndarray:
    arr = np.ascontiguousarray(values, dtype=dtype)
    expected = spec.dims + extra_shape
    if arr.shape != expected:
        raise ValueError(f"{name} has shape {arr.shape}, expected {expected}")
    return arr


@dataclass
class LogitsGrid:
    """Per-voxel class scores with shape (H, W, Z, N); the prior storage currency."""

    spec: GridSpec
    values: np.ndarray

    def __post_init__(self):
        self.values = _check_grid_values(self.spec, self.values, (self.spec.n_classes,), "values", np.float32)
        check_finite(self.values, "values")

    def copy(self) -> "LogitsGrid":
        return LogitsGrid(self.spec, self.values.copy())


@dataclass
class LabelGrid:
    """Per-voxel semantic labels with shape (H, W, Z), each in [0, n_classes)."""

    spec: GridSpec
    labels: np.ndarray

    def __post_init__(self):
        self.labels = _check_grid_values(self.spec, self.labels, (), "labels", np.int64)
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.spec.n_classes):
            raise ValueError("labels outside [0, n_classes)")

    def copy(self) -> "LabelGrid":
        return LabelGrid(self.spec, self.labels.copy())


@dataclass
class FeatureGrid:
    """Dense BEV feature plane of shape (H, W, C)."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError(f"feature values must be 3-d (H, W, C), got shape {self.values.shape}")
        if min(self.values.shape) < 1:
            raise ValueError("feature dims must all be >= 1")
        check_finite(self.values, "feature values")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class ClassPartition:
    """Disjoint dynamic/static class index sets; together with the free label they cover all classes."""

    dynamic: frozenset = field(default_factory=frozenset)
    static_: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "dynamic", frozenset(int(c) for c in self.dynamic))
        object.__setattr__(self, "static_", frozenset(int(c) for c in self.static_))
        if self.dynamic & self.static_:
            raise ValueError("dynamic and static class sets overlap")

    @classmethod
    def benchmark(cls) -> "ClassPartition":
        """11 movable categories (0-10) and 6 immovable ones (11-16); 17 is free."""
        return cls(dynamic=frozenset(range(0, 11)), static_=frozenset(range(11, 17)))

    def validate_for(self, spec: GridSpec) -> None:
        covered = self.dynamic | self.static_ | {spec.l_free}
        if covered != set(range(spec.n_classes)):
            raise ValueError("partition plus free label does not cover [0, n_classes) exactly")


class MiouResult(NamedTuple):
    dynamic: float
    static_: float
    all_: float


def height_to_channel(logits: LogitsGrid) -> FeatureGrid:
    """Fold (z, class) into channels: output (H, W, Z*N) with channel z*N + c = values[..., z, c]."""
    h, w, z = logits.spec.dims
    n = logits.spec.n_classes
    return FeatureGrid(logits.values.reshape(h, w, z * n))


def channel_to_height(feat: FeatureGrid, spec: GridSpec) -> LogitsGrid:
    """Inverse of :func:`height_to_channel`; the channel count must equal Z*N."""
    h, w, z = spec.dims
    n = spec.n_classes
    if feat.channels != z * n:
        raise ValueError(f"feature has {feat.channels} channels, expected Z*N = {z * n}")
    if (feat.height, feat.width) != (h, w):
        raise ValueError(f"feature plane is {feat.height}x{feat.width}, spec wants {h}x{w}")
    return LogitsGrid(spec, feat.values.reshape(h, w, z, n))


def decode_labels(logits: LogitsGrid) -> LabelGrid:
    """Per-voxel argmax over the class axis; ties go to the lowest class index."""
    return LabelGrid(logits.spec, np.argmax(logits.values, axis=-1))


def confusion_matrix(pred: np.ndarray, truth: np.ndarray, n_classes: int) -> np.ndarray:
    """(N, N) counts indexed [truth, pred]."""
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    flat = truth * n_classes + pred
    return np.bincount(flat, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def miou_from_confusion(conf: np.ndarray, partition: ClassPartition, l_free: int) -> MiouResult:
    n_classes = conf.shape[0]
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - np.diag(conf)
    valid = union > 0
    iou = np.zeros(n_classes)
    iou[valid] = inter[valid] / union[valid]

    def mean_over(classes) -> float:
        picked = [c for c in sorted(classes) if c != l_free and valid[c]]
        if not picked:
            return float("nan")
        return float(np.mean(iou[picked]))

    return MiouResult(
        dynamic=mean_over(partition.dynamic),
        static_=mean_over(partition.static_),
        all_=mean_over(partition.dynamic | partition.static_),
    )


def miou(pred: LabelGrid, truth: LabelGrid, partition: ClassPartition) -> MiouResult:
    """Mean IoU over dynamic, static and all semantic classes.

    The free label is excluded from every mean; classes whose union is empty in
    both grids are skipped rather than counted as 0 or 1.
    """
    if pred.spec != truth.spec:
        raise ValueError("pred and truth use different grid specs")
    partition.validate_for(pred.spec)
    conf = confusion_matrix(pred.labels, truth.labels, pred.spec.n_classes)
    return miou_from_confusion(conf, partition, pred.spec.l_free)
