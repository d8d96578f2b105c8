"""Rigid-body poses, pinhole cameras, local/global transforms and tile indexing."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .grid import GridSpec
from .validation import as_float_array

__all__ = [
    "Pose",
    "CameraModel",
    "TileKey",
    "local_to_global",
    "global_to_local",
    "tile_of",
    "pixel_ray",
    "camera_point_to_ego",
    "voxel_index",
    "pose_from_json",
    "camera_from_json",
    "load_cameras",
]

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class Pose:
    """Ego-to-global rigid transform as a 4x4 homogeneous matrix."""

    matrix: np.ndarray

    def __post_init__(self):
        m = as_float_array(np.array(self.matrix, dtype=np.float64), "pose matrix")
        if m.shape != (4, 4):
            raise ValueError(f"pose matrix must be 4x4, got {m.shape}")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("pose bottom row must be exactly (0, 0, 0, 1)")
        r = m[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=_ORTHO_TOL):
            raise ValueError("pose rotation block is not orthonormal")
        if not math.isclose(float(np.linalg.det(r)), 1.0, abs_tol=1e-6):
            raise ValueError("pose rotation block must have determinant +1")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(4))

    @classmethod
    def from_xyyaw(cls, x: float, y: float, yaw: float, z: float = 0.0) -> "Pose":
        c, s = math.cos(yaw), math.sin(yaw)
        m = np.eye(4)
        m[0, 0], m[0, 1] = c, -s
        m[1, 0], m[1, 1] = s, c
        m[0, 3], m[1, 3], m[2, 3] = x, y, z
        return cls(m)

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def inverse(self) -> "Pose":
        r = self.matrix[:3, :3]
        t = self.matrix[:3, 3]
        m = np.eye(4)
        m[:3, :3] = r.T
        m[:3, 3] = -r.T @ t
        return Pose(m)

    def apply(self, p: np.ndarray) -> np.ndarray:
        """Transform 3-d point(s); p has shape (3,) or (..., 3)."""
        p = np.asarray(p, dtype=np.float64)
        return p @ self.matrix[:3, :3].T + self.matrix[:3, 3]


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics plus the camera-to-ego extrinsic transform."""

    k: np.ndarray
    cam_to_ego: Pose
    width: int
    height: int

    def __post_init__(self):
        k = as_float_array(np.array(self.k, dtype=np.float64), "intrinsics")
        if k.shape != (3, 3):
            raise ValueError(f"intrinsics must be 3x3, got {k.shape}")
        if not (k[1, 0] == 0 and k[2, 0] == 0 and k[2, 1] == 0 and k[2, 2] == 1):
            raise ValueError("intrinsics must be upper-triangular with k[2][2] = 1")
        if k[0, 0] <= 0 or k[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        k.flags.writeable = False
        object.__setattr__(self, "k", k)

    @property
    def origin_in_ego(self) -> np.ndarray:
        return self.cam_to_ego.translation


class TileKey(NamedTuple):
    """Integer index of a tile in the global XY plane."""

    i: int
    j: int


def local_to_global(c, pose: Pose) -> np.ndarray:
    """Lift a BEV point (x, y) in the ego frame to z=0, apply the pose, return global (x, y)."""
    x, y = float(c[0]), float(c[1])
    m = pose.matrix
    gx = m[0, 0] * x + m[0, 1] * y + m[0, 3]
    gy = m[1, 0] * x + m[1, 1] * y + m[1, 3]
    return np.array([gx, gy])


def global_to_local(p, pose: Pose) -> np.ndarray:
    """Exact XY inverse of :func:`local_to_global` for the same pose."""
    m = pose.matrix
    a = m[:2, :2]
    b = m[:2, 3]
    rhs = np.array([float(p[0]) - b[0], float(p[1]) - b[1]])
    return np.linalg.solve(a, rhs)


def bev_local_to_global(points: np.ndarray, pose: Pose) -> np.ndarray:
    """Vectorized :func:`local_to_global` for an (..., 2) array of ego BEV points."""
    m = pose.matrix
    return points @ m[:2, :2].T + m[:2, 3]


def tile_of(p, tile_extent: float) -> tuple[TileKey, np.ndarray]:
    """Locate the tile containing a global XY point.

    Returns (key, offset) with key = floor(p / tile_extent) componentwise and
    offset = p - key * tile_extent guaranteed inside [0, tile_extent)^2.
    """
    if not tile_extent > 0:
        raise ValueError("tile_extent must be positive")
    key = []
    offset = []
    for v in (float(p[0]), float(p[1])):
        k = math.floor(v / tile_extent)
        off = v - k * tile_extent
        # Division rounding can land the quotient one cell off right at a boundary.
        if off < 0.0:
            k -= 1
            off += tile_extent
        elif off >= tile_extent:
            k += 1
            off -= tile_extent
        key.append(k)
        offset.append(off)
    return TileKey(key[0], key[1]), np.array(offset)


def pixel_ray(cam: CameraModel, u: float, v: float) -> np.ndarray:
    """Back-projected ray direction K^-1 (u, v, 1), normalized so the z component is exactly 1."""
    if not (0 <= u < cam.width and 0 <= v < cam.height):
        raise ValueError(f"pixel ({u}, {v}) outside {cam.width}x{cam.height} image")
    r = np.linalg.solve(cam.k, np.array([float(u), float(v), 1.0]))
    r = r / r[2]
    r[2] = 1.0
    return r


def camera_point_to_ego(p_c, cam: CameraModel) -> np.ndarray:
    """Homogeneous multiply by the camera-to-ego transform, dropping the fourth component."""
    return cam.cam_to_ego.apply(np.asarray(p_c, dtype=np.float64))


def voxel_index(p_ego, spec: GridSpec) -> tuple[int, int, int] | None:
    """floor((p - p_min) / v_size) per axis, or None when outside the grid."""
    idx = []
    for a in range(3):
        i = math.floor((float(p_ego[a]) - spec.p_min[a]) / spec.v_size)
        if i < 0 or i >= spec.dims[a]:
            return None
        idx.append(i)
    return idx[0], idx[1], idx[2]


def voxel_indices(points: np.ndarray, spec: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`voxel_index` over an (..., 3) array: (indices, in_grid mask)."""
    g = (points - np.asarray(spec.p_min)) / spec.v_size
    idx = np.floor(g).astype(np.int64)
    ok = np.all((idx >= 0) & (idx < np.asarray(spec.dims)), axis=-1)
    return idx, ok


def pose_from_json(obj) -> Pose:
    """Pose from a flat list of 16 row-major numbers."""
    arr = np.asarray(obj, dtype=np.float64)
    if arr.size != 16:
        raise ValueError("pose document must contain 16 numbers")
    return Pose(arr.reshape(4, 4))


def camera_from_json(obj: dict) -> CameraModel:
    """Camera from {"k": 9 numbers, "cam_to_ego": 16 numbers, "width": int, "height": int}."""
    k = np.asarray(obj["k"], dtype=np.float64)
    if k.size != 9:
        raise ValueError("camera 'k' must contain 9 numbers")
    return CameraModel(
        k=k.reshape(3, 3),
        cam_to_ego=pose_from_json(obj["cam_to_ego"]),
        width=int(obj["width"]),
        height=int(obj["height"]),
    )


def load_cameras(path) -> list[CameraModel]:
    """Read a JSON document holding one camera object or a list of them."""
    with open(path) as f:
        doc = json.load(f)
    if isinstance(doc, dict):
        doc = [doc]
    return [camera_from_json(c) for c in doc]
