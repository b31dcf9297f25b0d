"""Core 3D grid types, intensity normalisation and affine resampling."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


def _as_shape3(shape) -> tuple[int, int, int]:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or any(s < 1 for s in shape):
        raise ValueError(f"expected 3 positive dimensions, got {shape}")
    return shape


@dataclass(frozen=True)
class Volume:
    """Real-valued 3D scalar grid with voxel spacing in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.array(self.data)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {data.shape}")
        _as_shape3(data.shape)
        if np.iscomplexobj(data):
            raise TypeError("volume data must be real")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 for s in spacing):
            raise ValueError(f"spacing must be 3 strictly positive values, got {spacing}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(np.asarray(data), self.spacing)


@dataclass(frozen=True)
class LabelVolume:
    """Integer class map; every label lies in ``[0, num_classes)``."""

    labels: np.ndarray
    num_classes: int = 2

    def __post_init__(self):
        labels = np.array(self.labels)
        if labels.ndim != 3:
            raise ValueError(f"label data must be 3D, got shape {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            if not np.all(np.equal(np.mod(labels, 1), 0)):
                raise ValueError("labels must be integral")
            labels = labels.astype(np.int64)
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape

    def mask(self, class_id: int) -> np.ndarray:
        return self.labels == class_id


@dataclass(frozen=True)
class Affine3D:
    """Homogeneous 4x4 transform acting on voxel coordinates centred on the grid."""

    matrix: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"affine must be 4x4, got {m.shape}")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("last row of an affine must be (0, 0, 0, 1)")
        if not np.all(np.isfinite(m)):
            raise ValueError("affine has non-finite entries")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "Affine3D":
        return cls(np.eye(4))

    @classmethod
    def translation(cls, offset: Sequence[float]) -> "Affine3D":
        m = np.eye(4)
        m[:3, 3] = offset
        return cls(m)

    @classmethod
    def from_rigid(cls, rotvec: Sequence[float], offset: Sequence[float]) -> "Affine3D":
        """Rotation vector (radians, axis-angle) followed by a translation in voxels."""
        from scipy.spatial.transform import Rotation

        m = np.eye(4)
        rotvec = np.asarray(rotvec, dtype=np.float64)
        if np.any(rotvec != 0):
            m[:3, :3] = Rotation.from_rotvec(rotvec).as_matrix()
        m[:3, 3] = offset
        return cls(m)

    @classmethod
    def rotation(cls, axis: int, angle: float) -> "Affine3D":
        """Rotation by ``angle`` radians about voxel axis 0, 1 or 2."""
        rotvec = np.zeros(3)
        rotvec[axis] = angle
        return cls.from_rigid(rotvec, np.zeros(3))

    def rigid_params(self) -> tuple[np.ndarray, np.ndarray]:
        """Rotation vector and translation of the nearest rigid transform."""
        from scipy.spatial.transform import Rotation

        rot = self.matrix[:3, :3]
        if np.array_equal(rot, np.eye(3)):
            rotvec = np.zeros(3)
        else:
            rotvec = Rotation.from_matrix(rot).as_rotvec()
        return rotvec, self.matrix[:3, 3].copy()

    @property
    def is_proper(self) -> bool:
        return bool(np.linalg.det(self.matrix[:3, :3]) > 0)

    def inverse(self) -> "Affine3D":
        if abs(np.linalg.det(self.matrix[:3, :3])) < 1e-12:
            raise np.linalg.LinAlgError("singular affine transform")
        if np.array_equal(self.matrix[:3, :3], np.eye(3)):
            # exact inverse for pure translations
            return Affine3D.translation(-self.matrix[:3, 3])
        return Affine3D(np.linalg.inv(self.matrix))

    def compose(self, other: "Affine3D") -> "Affine3D":
        """``self`` applied after ``other``."""
        return Affine3D(self.matrix @ other.matrix)

    def tolist(self) -> list[list[float]]:
        return self.matrix.tolist()


def normalize(vol: Volume) -> Volume:
    """Rescale intensities linearly onto [0, 1]; constant volumes become zeros."""
    data = np.asarray(vol.data, dtype=np.float64)
    lo, hi = data.min(), data.max()
    if hi == lo:
        return vol.with_data(np.zeros_like(data))
    out = (data - lo) / (hi - lo)
    # pin the extrema so min/max are exactly 0 and 1 after rounding
    out[data == lo] = 0.0
    out[data == hi] = 1.0
    return vol.with_data(out)


def grid_center(shape: Sequence[int]) -> np.ndarray:
    return (np.asarray(shape, dtype=np.float64) - 1.0) / 2.0


def _trilinear(data: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Sample ``data`` at fractional voxel ``coords`` (3, ...), zero outside."""
    shape = data.shape
    base = np.floor(coords)
    frac = coords - base
    base = base.astype(np.int64)
    out = np.zeros(coords.shape[1:], dtype=np.float64)
    for corner in range(8):
        offs = [(corner >> a) & 1 for a in range(3)]
        weight = np.ones(coords.shape[1:])
        idx = []
        valid = np.ones(coords.shape[1:], dtype=bool)
        for a in range(3):
            i = base[a] + offs[a]
            w = frac[a] if offs[a] else 1.0 - frac[a]
            weight = weight * w
            valid &= (i >= 0) & (i < shape[a])
            idx.append(np.clip(i, 0, shape[a] - 1))
        contrib = np.where(valid, data[tuple(idx)], 0.0)
        # skip zero weights so exact integer sampling never touches neighbours
        out += np.where(weight != 0, weight * contrib, 0.0)
    return out


def _nearest(data: np.ndarray, coords: np.ndarray, fill=0) -> np.ndarray:
    idx = np.floor(coords + 0.5).astype(np.int64)
    valid = np.ones(coords.shape[1:], dtype=bool)
    for a in range(3):
        valid &= (idx[a] >= 0) & (idx[a] < data.shape[a])
        idx[a] = np.clip(idx[a], 0, data.shape[a] - 1)
    return np.where(valid, data[tuple(idx)], fill)


def sample_coordinates(shape: Sequence[int], t: Affine3D) -> np.ndarray:
    """Input-grid coordinates read by each output voxel under ``t``."""
    inv = t.inverse().matrix
    c = grid_center(shape)
    grid = np.indices(shape, dtype=np.float64).reshape(3, -1)
    centred = grid - c[:, None]
    src = inv[:3, :3] @ centred + inv[:3, 3:4] + c[:, None]
    return src.reshape((3, *shape))


def resample_affine(vol: Volume, t: Affine3D, order: int = 1) -> Volume:
    """Resample ``vol`` under ``t`` about the grid centre.

    ``order=1`` is trilinear interpolation, ``order=0`` nearest neighbour.
    Samples falling outside the input read 0.
    """
    if np.array_equal(t.matrix, np.eye(4)):
        return vol.with_data(np.array(vol.data, dtype=np.float64))
    coords = sample_coordinates(vol.shape, t)
    if order == 1:
        out = _trilinear(np.asarray(vol.data, dtype=np.float64), coords)
    elif order == 0:
        out = _nearest(np.asarray(vol.data, dtype=np.float64), coords, 0.0)
    else:
        raise ValueError("order must be 0 or 1")
    return vol.with_data(out)


def resample_labels(labels: LabelVolume, t: Affine3D) -> LabelVolume:
    """Nearest-neighbour resampling of a label map; outside reads class 0."""
    if np.array_equal(t.matrix, np.eye(4)):
        return labels
    coords = sample_coordinates(labels.shape, t)
    out = _nearest(np.asarray(labels.labels), coords, 0)
    return LabelVolume(out.astype(np.int64), labels.num_classes)
