"""Sparse tile-indexed global occupancy map.

Tiles are fixed-size patches of a global XY raster (pitch ``cell_size``,
``tile_dims`` cells per tile) created lazily on first write. Each cell holds a
BEV-flattened logits vector of Z * n_classes float32 values plus a written
flag; unwritten cells read back as zeros with validity false.

Container format (little-endian): magic ``LMPO``, u32 version 1, header
(cell_size f64, tile dims u32 x2, Z u32, n_classes u32, l_free u32, tile count
u64), then per tile: key as two i64, raw float32 cells row-major with class
fastest, written flags bit-packed LSB-first, and a CRC-32 of the tile record.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, TileKey, bev_local_to_global
from .grid import GridSpec, ClassPartition, LogitsGrid, FeatureGrid, decode_labels
from .raycast import MaskedLogits

__all__ = [
    "Tile",
    "TileStore",
    "UpdateRecord",
    "fetch_prior",
    "update",
    "remove_dynamic_v1",
    "remove_dynamic_v2",
    "merge_agents",
    "save_store",
    "load_store",
    "export_ply",
    "store_stats",
    "save_record",
    "load_record",
    "StoreFormatError",
]

_MAGIC = b"LMPO"
_VERSION = 1

DEFAULT_TILE_DIMS = (50, 50)


class StoreFormatError(RuntimeError):
    """Raised when a container file is malformed or fails an integrity check."""


@dataclass
class Tile:
    key: TileKey
    cells: np.ndarray
    written: np.ndarray


@dataclass
class TileStore:
    """Sparse mapping from tile keys to tiles; absent tiles are empty."""

    spec: GridSpec
    cell_size: float = 0.0
    tile_dims: tuple[int, int] = DEFAULT_TILE_DIMS
    tiles: dict[TileKey, Tile] = field(default_factory=dict)

    def __post_init__(self):
        if self.cell_size == 0.0:
            self.cell_size = self.spec.v_size
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        self.tile_dims = (int(self.tile_dims[0]), int(self.tile_dims[1]))
        if min(self.tile_dims) < 1:
            raise ValueError("tile_dims must be >= 1")

    @property
    def z(self) -> int:
        return self.spec.dims[2]

    @property
    def n_classes(self) -> int:
        return self.spec.n_classes

    @property
    def channels(self) -> int:
        return self.z * self.n_classes

    def _new_tile(self, key: TileKey) -> Tile:
        th, tw = self.tile_dims
        tile = Tile(
            key=key,
            cells=np.zeros((th, tw, self.channels), dtype=np.float32),
            written=np.zeros((th, tw), dtype=bool),
        )
        self.tiles[key] = tile
        return tile

    def written_cell_count(self) -> int:
        return int(sum(t.written.sum() for t in self.tiles.values()))

    def equals(self, other: "TileStore") -> bool:
        """Bit-exact comparison of layout metadata and tile contents."""
        if (
            self.cell_size != other.cell_size
            or self.tile_dims != other.tile_dims
            or self.z != other.z
            or self.n_classes != other.n_classes
            or self.spec.l_free != other.spec.l_free
        ):
            return False
        if set(self.tiles) != set(other.tiles):
            return False
        for key, tile in self.tiles.items():
            o = other.tiles[key]
            if not np.array_equal(tile.cells, o.cells) or not np.array_equal(tile.written, o.written):
                return False
        return True


@dataclass(frozen=True)
class UpdateRecord:
    """One agent's masked observation, ordered by (timestamp, agent_id, sequence_no)."""

    agent_id: str
    sequence_no: int
    timestamp: float
    pose: Pose
    payload: MaskedLogits

    @property
    def sort_key(self):
        return (self.timestamp, self.agent_id, self.sequence_no)


def _raster_cells(store: TileStore, points: np.ndarray):
    """Global XY points -> (tile key i/j, within-tile i/j) integer arrays."""
    gi = np.floor(points[:, 0] / store.cell_size).astype(np.int64)
    gj = np.floor(points[:, 1] / store.cell_size).astype(np.int64)
    th, tw = store.tile_dims
    ki = gi // th
    kj = gj // tw
    return ki, kj, gi - ki * th, gj - kj * tw


def _check_layout(store: TileStore, spec: GridSpec, what: str) -> None:
    if spec.dims[2] != store.z or spec.n_classes != store.n_classes:
        raise ValueError(
            f"{what} layout ({spec.dims[2]} x {spec.n_classes}) does not match "
            f"store layout ({store.z} x {store.n_classes})"
        )


def fetch_prior(store: TileStore, pose: Pose, spec: GridSpec) -> tuple[FeatureGrid, np.ndarray]:
    """Gather the BEV-flattened prior for a local grid placed at ``pose``.

    Each local BEV cell center is mapped to its nearest global raster cell;
    cells falling in absent tiles or unwritten cells return zeros. Returns the
    (H, W, Z*N) prior plane and the (H, W) validity mask.
    """
    _check_layout(store, spec, "requested grid")
    h, w, _ = spec.dims
    centers = spec.bev_centers().reshape(-1, 2)
    points = bev_local_to_global(centers, pose)
    ki, kj, wi, wj = _raster_cells(store, points)

    out = np.zeros((h * w, store.channels), dtype=np.float64)
    valid = np.zeros(h * w, dtype=bool)
    keys = np.stack([ki, kj], axis=1)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    for u, key in enumerate(uniq):
        tile = store.tiles.get(TileKey(int(key[0]), int(key[1])))
        if tile is None:
            continue
        rows = np.nonzero(inverse == u)[0]
        twi, twj = wi[rows], wj[rows]
        hit = tile.written[twi, twj]
        out[rows[hit]] = tile.cells[twi[hit], twj[hit]]
        valid[rows] = hit
    return FeatureGrid(out.reshape(h, w, store.channels)), valid.reshape(h, w)


def update(store: TileStore, pose: Pose, payload: MaskedLogits) -> int:
    """Scatter observed voxel blocks into the global raster, replacing prior content.

    Only BEV cells containing at least one observed voxel are written; within a
    cell, unobserved voxel blocks keep whatever the store already holds. Local
    cells are scanned row-major, so colliding cells resolve to the last one in
    scan order. Returns the number of local cells written.
    """
    spec = payload.logits.spec
    _check_layout(store, spec, "payload")
    h, w, z = spec.dims
    n = spec.n_classes
    values = payload.logits.values.reshape(h * w, z * n)
    obs = payload.observed.reshape(h * w, z)
    obs_any = obs.any(axis=1)
    obs_all = obs.all(axis=1)

    centers = spec.bev_centers().reshape(-1, 2)
    points = bev_local_to_global(centers, pose)
    ki, kj, wi, wj = _raster_cells(store, points)

    cells_written = 0
    for idx in np.nonzero(obs_any)[0]:
        key = TileKey(int(ki[idx]), int(kj[idx]))
        tile = store.tiles.get(key)
        if tile is None:
            tile = store._new_tile(key)
        ti, tj = wi[idx], wj[idx]
        if obs_all[idx]:
            tile.cells[ti, tj, :] = values[idx]
        else:
            cell = tile.cells[ti, tj]
            for zz in np.nonzero(obs[idx])[0]:
                cell[zz * n : (zz + 1) * n] = values[idx, zz * n : (zz + 1) * n]
        tile.written[ti, tj] = True
        cells_written += 1
    return cells_written


def remove_dynamic_v1(logits: LogitsGrid, partition: ClassPartition) -> LogitsGrid:
    """Zero the dynamic-class channels of every voxel whose argmax label is dynamic."""
    labels = decode_labels(logits).labels
    dyn_classes = np.zeros(logits.spec.n_classes, dtype=bool)
    dyn_classes[sorted(partition.dynamic)] = True
    dyn_voxels = dyn_classes[labels]
    out = logits.values.copy()
    out[dyn_voxels[..., None] & dyn_classes] = 0.0
    return LogitsGrid(logits.spec, out)


def remove_dynamic_v2(logits: LogitsGrid, partition: ClassPartition, seed: int) -> LogitsGrid:
    """Replace each dynamic-labeled voxel's logits with those of a random free-labeled voxel."""
    labels = decode_labels(logits).labels
    dyn_classes = np.zeros(logits.spec.n_classes, dtype=bool)
    dyn_classes[sorted(partition.dynamic)] = True
    dyn_voxels = dyn_classes[labels]
    free_voxels = labels == logits.spec.l_free
    n_dyn = int(dyn_voxels.sum())
    out = logits.values.copy()
    if n_dyn == 0:
        return LogitsGrid(logits.spec, out)
    free_flat = np.nonzero(free_voxels.reshape(-1))[0]
    if free_flat.size == 0:
        raise ValueError("no free-labeled voxels available to draw replacements from")
    rng = np.random.default_rng(seed)
    picks = free_flat[rng.integers(0, free_flat.size, size=n_dyn)]
    flat = out.reshape(-1, logits.spec.n_classes)
    flat[np.nonzero(dyn_voxels.reshape(-1))[0]] = flat[picks]
    return LogitsGrid(logits.spec, out)


def merge_agents(store: TileStore, records: list[UpdateRecord]) -> TileStore:
    """Apply crowdsourced records in (timestamp, agent_id, sequence_no) order.

    The result is independent of the arrival order of ``records``; duplicate
    (agent_id, sequence_no) pairs are rejected.
    """
    seen = set()
    for r in records:
        ident = (r.agent_id, r.sequence_no)
        if ident in seen:
            raise ValueError(f"duplicate update record for agent {r.agent_id!r} seq {r.sequence_no}")
        seen.add(ident)
    for r in sorted(records, key=lambda r: r.sort_key):
        update(store, r.pose, r.payload)
    return store


def save_store(store: TileStore, path) -> None:
    th, tw = store.tile_dims
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(
            struct.pack(
                "<dIIIIIQ",
                store.cell_size,
                th,
                tw,
                store.z,
                store.n_classes,
                store.spec.l_free,
                len(store.tiles),
            )
        )
        for key in sorted(store.tiles):
            tile = store.tiles[key]
            record = struct.pack("<qq", key.i, key.j)
            record += np.ascontiguousarray(tile.cells, dtype="<f4").tobytes()
            record += np.packbits(tile.written.reshape(-1), bitorder="little").tobytes()
            f.write(record)
            f.write(struct.pack("<I", zlib.crc32(record) & 0xFFFFFFFF))


def load_store(path) -> TileStore:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _MAGIC:
        raise StoreFormatError("not an occupancy tile store (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != _VERSION:
        raise StoreFormatError(f"unsupported container version {version}")
    cell_size, th, tw, z, n_classes, l_free, n_tiles = struct.unpack_from("<dIIIIIQ", data, 8)
    spec = GridSpec(p_min=(0.0, 0.0, 0.0), v_size=cell_size, dims=(th, tw, z), n_classes=n_classes, l_free=l_free)
    store = TileStore(spec=spec, cell_size=cell_size, tile_dims=(th, tw))
    pos = 8 + struct.calcsize("<dIIIIIQ")
    cells_bytes = th * tw * z * n_classes * 4
    flag_bytes = (th * tw + 7) // 8
    record_len = 16 + cells_bytes + flag_bytes
    for _ in range(n_tiles):
        record = data[pos : pos + record_len]
        if len(record) != record_len:
            raise StoreFormatError("truncated tile record")
        (crc,) = struct.unpack_from("<I", data, pos + record_len)
        if zlib.crc32(record) & 0xFFFFFFFF != crc:
            raise StoreFormatError("tile record failed its CRC-32 check")
        ki, kj = struct.unpack_from("<qq", record, 0)
        cells = np.frombuffer(record, dtype="<f4", count=th * tw * z * n_classes, offset=16)
        cells = cells.reshape(th, tw, z * n_classes).copy()
        packed = np.frombuffer(record, dtype=np.uint8, count=flag_bytes, offset=16 + cells_bytes)
        written = np.unpackbits(packed, count=th * tw, bitorder="little").astype(bool).reshape(th, tw)
        key = TileKey(ki, kj)
        store.tiles[key] = Tile(key=key, cells=cells, written=written)
        pos += record_len + 4
    return store


def store_stats(store: TileStore) -> dict:
    th, tw = store.tile_dims
    n_cells = len(store.tiles) * th * tw
    stats = {
        "tiles": len(store.tiles),
        "tile_dims": store.tile_dims,
        "cell_size": store.cell_size,
        "channels": store.channels,
        "written_cells": store.written_cell_count(),
        "allocated_cells": n_cells,
        "approx_bytes": n_cells * store.channels * 4 + len(store.tiles) * th * tw,
    }
    if store.tiles:
        keys = np.array([[k.i, k.j] for k in store.tiles])
        stats["key_min"] = (int(keys[:, 0].min()), int(keys[:, 1].min()))
        stats["key_max"] = (int(keys[:, 0].max()), int(keys[:, 1].max()))
    return stats


# Fixed inspection palette: one RGB per class index (free never exported).
_PALETTE = np.array(
    [
        (255, 120, 50), (255, 192, 203), (255, 255, 0), (0, 150, 245), (0, 255, 255),
        (255, 127, 0), (255, 0, 0), (255, 240, 150), (135, 60, 0), (160, 32, 240),
        (255, 0, 255), (139, 137, 137), (75, 0, 75), (150, 240, 80), (230, 230, 250),
        (0, 175, 0), (0, 255, 127), (128, 128, 128), (64, 64, 64), (192, 192, 192),
    ],
    dtype=np.uint8,
)


def export_ply(store: TileStore, path) -> int:
    """ASCII point cloud with one point per occupied written voxel, colored by argmax class.

    Vertical placement uses the store spec's z origin and voxel size; loaded
    stores place the first layer at z = 0.
    """
    th, tw = store.tile_dims
    z, n = store.z, store.n_classes
    rows = []
    for key in sorted(store.tiles):
        tile = store.tiles[key]
        labels = np.argmax(tile.cells.reshape(th, tw, z, n), axis=-1)
        occ = (labels != store.spec.l_free) & tile.written[:, :, None]
        ti, tj, tk = np.nonzero(occ)
        if ti.size == 0:
            continue
        x = (key.i * th + ti + 0.5) * store.cell_size
        y = (key.j * tw + tj + 0.5) * store.cell_size
        zc = store.spec.p_min[2] + (tk + 0.5) * store.spec.v_size
        color = _PALETTE[labels[ti, tj, tk] % len(_PALETTE)]
        rows.append(np.column_stack([x, y, zc, color]))
    points = np.concatenate(rows, axis=0) if rows else np.empty((0, 6))
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(points)}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        f.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        f.write("end_header\n")
        for x, y, zc, r, g, b in points:
            f.write(f"{x:.3f} {y:.3f} {zc:.3f} {int(r)} {int(g)} {int(b)}\n")
    return len(points)


def save_record(path, record: UpdateRecord) -> None:
    """Persist one update record as an .npz archive (also usable as a bare payload)."""
    spec = record.payload.logits.spec
    np.savez_compressed(
        path,
        agent_id=np.str_(record.agent_id),
        sequence_no=np.int64(record.sequence_no),
        timestamp=np.float64(record.timestamp),
        pose=record.pose.matrix,
        values=record.payload.logits.values,
        observed=record.payload.observed,
        p_min=np.asarray(spec.p_min),
        v_size=np.float64(spec.v_size),
        dims=np.asarray(spec.dims, dtype=np.int64),
        n_classes=np.int64(spec.n_classes),
        l_free=np.int64(spec.l_free),
    )


def load_record(path) -> UpdateRecord:
    with np.load(path, allow_pickle=False) as z:
        spec = GridSpec(
            p_min=tuple(z["p_min"]),
            v_size=float(z["v_size"]),
            dims=tuple(int(d) for d in z["dims"]),
            n_classes=int(z["n_classes"]),
            l_free=int(z["l_free"]),
        )
        payload = MaskedLogits(LogitsGrid(spec, z["values"]), z["observed"])
        return UpdateRecord(
            agent_id=str(z["agent_id"]),
            sequence_no=int(z["sequence_no"]),
            timestamp=float(z["timestamp"]),
            pose=Pose(z["pose"]),
            payload=payload,
        )
