"""Voxel ray traversal: camera visibility masks and dense depth from occupancy."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .geometry import CameraModel, pixel_ray
from .grid import GridSpec, LabelGrid, LogitsGrid

__all__ = [
    "VisibilityMask",
    "DepthMap",
    "SamplingParams",
    "MaskedLogits",
    "visibility_mask",
    "apply_visibility",
    "render_depth",
    "write_pfm",
    "read_pfm",
    "write_pgm16",
    "read_pgm16",
    "write_depth",
]


@dataclass
class VisibilityMask:
    """Per-voxel boolean marking voxels observable from at least one camera."""

    spec: GridSpec
    observed: np.ndarray

    def __post_init__(self):
        self.observed = np.ascontiguousarray(self.observed, dtype=bool)
        if self.observed.shape != self.spec.dims:
            raise ValueError(f"mask shape {self.observed.shape} does not match spec dims {self.spec.dims}")


@dataclass
class MaskedLogits:
    """Occupancy logits bundled with their per-voxel validity; only observed voxels may be persisted."""

    logits: LogitsGrid
    observed: np.ndarray

    def __post_init__(self):
        self.observed = np.ascontiguousarray(self.observed, dtype=bool)
        if self.observed.shape != self.logits.spec.dims:
            raise ValueError("observed mask shape does not match logits grid")


@dataclass
class DepthMap:
    """Dense per-pixel depth in meters; d_max encodes 'no hit'."""

    width: int
    height: int
    depth: np.ndarray
    d_max: float

    def __post_init__(self):
        self.depth = np.ascontiguousarray(self.depth, dtype=np.float64)
        if self.depth.shape != (self.height, self.width):
            raise ValueError(f"depth shape {self.depth.shape} must be (height, width)")
        if self.depth.size and (self.depth.min() <= 0 or self.depth.max() > self.d_max):
            raise ValueError("depth values must lie in (0, d_max]")


@dataclass(frozen=True)
class SamplingParams:
    """Depth sampling grid: samples at i * delta_d for i = 1..n_samples."""

    delta_d: float
    d_max: float

    def __post_init__(self):
        if not 0 < self.delta_d <= self.d_max:
            raise ValueError("need 0 < delta_d <= d_max")

    @property
    def n_samples(self) -> int:
        # Float division may land just below the exact integer ratio (e.g. 100 / 0.1).
        return int(math.floor(self.d_max / self.delta_d + 1e-9))


@njit(cache=True)
def _segment_observed(occ, ox, oy, oz, ti, tj, tk):
    """Walk the segment from origin (grid units) to the center of voxel (ti, tj, tk).

    Returns True iff no occupied voxel is intersected strictly before the target.
    Voxels outside the grid never block. Tie rule on shared boundaries: advance
    x first, then y, then z.
    """
    h, w, z = occ.shape
    tx = ti + 0.5
    ty = tj + 0.5
    tz = tk + 0.5
    dx = tx - ox
    dy = ty - oy
    dz = tz - oz

    vx = int(math.floor(ox))
    vy = int(math.floor(oy))
    vz = int(math.floor(oz))

    if vx == ti and vy == tj and vz == tk:
        return True
    if 0 <= vx < h and 0 <= vy < w and 0 <= vz < z and occ[vx, vy, vz]:
        return False

    inf = np.inf
    if dx > 0.0:
        sx, tdx = 1, 1.0 / dx
        tmx = (vx + 1.0 - ox) / dx
    elif dx < 0.0:
        sx, tdx = -1, -1.0 / dx
        tmx = (vx - ox) / dx
    else:
        sx, tdx, tmx = 0, inf, inf
    if dy > 0.0:
        sy, tdy = 1, 1.0 / dy
        tmy = (vy + 1.0 - oy) / dy
    elif dy < 0.0:
        sy, tdy = -1, -1.0 / dy
        tmy = (vy - oy) / dy
    else:
        sy, tdy, tmy = 0, inf, inf
    if dz > 0.0:
        sz, tdz = 1, 1.0 / dz
        tmz = (vz + 1.0 - oz) / dz
    elif dz < 0.0:
        sz, tdz = -1, -1.0 / dz
        tmz = (vz - oz) / dz
    else:
        sz, tdz, tmz = 0, inf, inf

    max_steps = abs(ti - vx) + abs(tj - vy) + abs(tk - vz) + 3
    for _ in range(max_steps):
        if tmx <= tmy and tmx <= tmz:
            vx += sx
            tmx += tdx
        elif tmy <= tmz:
            vy += sy
            tmy += tdy
        else:
            vz += sz
            tmz += tdz
        if vx == ti and vy == tj and vz == tk:
            return True
        if 0 <= vx < h and 0 <= vy < w and 0 <= vz < z and occ[vx, vy, vz]:
            return False
    return False


@njit(cache=True)
def _visibility_kernel(occ, origins, observed):
    h, w, z = occ.shape
    for c in range(origins.shape[0]):
        ox = origins[c, 0]
        oy = origins[c, 1]
        oz = origins[c, 2]
        for i in range(h):
            for j in range(w):
                for k in range(z):
                    if not observed[i, j, k]:
                        if _segment_observed(occ, ox, oy, oz, i, j, k):
                            observed[i, j, k] = True


def visibility_mask(labels: LabelGrid, cams: list[CameraModel]) -> VisibilityMask:
    """First-hit visibility from every camera origin toward every voxel center.

    A voxel is observed iff, for at least one camera, no occupied voxel lies
    strictly before it on the origin-to-center segment; the first occupied
    voxel on a ray is itself observed and everything behind it is not. With no
    cameras the mask is all-unobserved.
    """
    spec = labels.spec
    observed = np.zeros(spec.dims, dtype=np.bool_)
    if cams:
        occ = (labels.labels != spec.l_free).astype(np.uint8)
        origins = np.empty((len(cams), 3), dtype=np.float64)
        for c, cam in enumerate(cams):
            origins[c] = (cam.origin_in_ego - np.asarray(spec.p_min)) / spec.v_size
        _visibility_kernel(occ, origins, observed)
    return VisibilityMask(spec, observed)


def apply_visibility(logits: LogitsGrid, mask: VisibilityMask) -> MaskedLogits:
    """Retain logits only inside the observed region; unobserved voxels are never persisted."""
    if mask.spec != logits.spec:
        raise ValueError("mask and logits use different grid specs")
    return MaskedLogits(logits, mask.observed.copy())


@njit(cache=True)
def _depth_kernel(occ, rays, t_mat, p_min, v_size, dd, nd, d_max, out):
    h_grid, w_grid, z_grid = occ.shape
    t00, t01, t02, t03 = t_mat[0, 0], t_mat[0, 1], t_mat[0, 2], t_mat[0, 3]
    t10, t11, t12, t13 = t_mat[1, 0], t_mat[1, 1], t_mat[1, 2], t_mat[1, 3]
    t20, t21, t22, t23 = t_mat[2, 0], t_mat[2, 1], t_mat[2, 2], t_mat[2, 3]
    for p in range(rays.shape[0]):
        xc = rays[p, 0]
        yc = rays[p, 1]
        hit = d_max
        for i in range(1, nd + 1):
            d = i * dd
            px = d * xc
            py = d * yc
            pz = d
            ex = t00 * px + t01 * py + t02 * pz + t03
            ey = t10 * px + t11 * py + t12 * pz + t13
            ez = t20 * px + t21 * py + t22 * pz + t23
            gx = int(math.floor((ex - p_min[0]) / v_size))
            if gx < 0 or gx >= h_grid:
                continue
            gy = int(math.floor((ey - p_min[1]) / v_size))
            if gy < 0 or gy >= w_grid:
                continue
            gz = int(math.floor((ez - p_min[2]) / v_size))
            if gz < 0 or gz >= z_grid:
                continue
            if occ[gx, gy, gz]:
                hit = d
                break
        out[p] = hit


def render_depth(labels: LabelGrid, cam: CameraModel, params: SamplingParams) -> DepthMap:
    """Per-pixel depth: smallest sampled depth whose voxel is occupied, else d_max.

    Samples i * delta_d along each back-projected ray, transforms to the ego
    frame and voxelizes; out-of-grid samples are skipped. Rays march from the
    nearest sample outward and stop at the first hit.
    """
    spec = labels.spec
    occ = (labels.labels != spec.l_free).astype(np.uint8)
    rays = np.empty((cam.height * cam.width, 2), dtype=np.float64)
    for v in range(cam.height):
        for u in range(cam.width):
            r = pixel_ray(cam, u, v)
            rays[v * cam.width + u, 0] = r[0]
            rays[v * cam.width + u, 1] = r[1]
    out = np.empty(cam.height * cam.width, dtype=np.float64)
    _depth_kernel(
        occ,
        rays,
        cam.cam_to_ego.matrix,
        np.asarray(spec.p_min),
        spec.v_size,
        params.delta_d,
        params.n_samples,
        params.d_max,
        out,
    )
    return DepthMap(cam.width, cam.height, out.reshape(cam.height, cam.width), params.d_max)


def write_pfm(depth: DepthMap, path) -> None:
    """Grayscale PFM: little-endian float32, bottom-up row order, scale -1.0."""
    header = f"Pf\n{depth.width} {depth.height}\n-1.0\n".encode("ascii")
    data = depth.depth[::-1].astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(data)


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline().strip() != b"Pf":
            raise ValueError("not a grayscale PFM file")
        w, h = (int(x) for x in f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(w * h * 4), dtype=dtype).reshape(h, w)
    return np.ascontiguousarray(data[::-1]).astype(np.float64)


def write_pgm16(depth: DepthMap, path) -> None:
    """Binary PGM, 16-bit millimeters (big-endian sample order), clamped at 65535."""
    mm = np.clip(np.rint(depth.depth * 1000.0), 0, 65535).astype(">u2")
    header = f"P5\n{depth.width} {depth.height}\n65535\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        f.write(mm.tobytes())


def read_pgm16(path) -> np.ndarray:
    """Returns depth in millimeters as uint16."""
    with open(path, "rb") as f:
        if f.readline().strip() != b"P5":
            raise ValueError("not a binary PGM file")
        w, h = (int(x) for x in f.readline().split())
        maxval = int(f.readline())
        if maxval != 65535:
            raise ValueError("expected 16-bit PGM")
        data = np.frombuffer(f.read(w * h * 2), dtype=">u2").reshape(h, w)
    return data.astype(np.uint16)


def write_depth(depth: DepthMap, path, fmt: str) -> None:
    if fmt == "pfm":
        write_pfm(depth, path)
    elif fmt == "pgm16":
        write_pgm16(depth, path)
    else:
        raise ValueError(f"unknown depth format {fmt!r}; use 'pfm' or 'pgm16'")
