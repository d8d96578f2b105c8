"""Synthetic scenes, the end-to-end fetch/fuse/update pipeline, evaluation and benchmarks.

Scenes are desk-scale stand-ins for drive sequences: a static world of boxes
on a drivable ground plane, per-frame moving dynamic boxes, and degraded
per-frame observations (an occluded azimuth sector forced toward free plus
logit noise). The "encoder" is a fixed random linear projection of the
degraded logits' BEV form, so the whole loop stays differentiable and fast.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .fusion import (
    FusionWeights,
    _conv_backward,
    _conv_forward,
    _softmax_ce,
    _target_labels,
    conv2d,
    fuse,
    init_weights,
    train_step,
)
from .geometry import CameraModel, Pose
from .grid import (
    ClassPartition,
    FeatureGrid,
    GridSpec,
    LabelGrid,
    LogitsGrid,
    MiouResult,
    channel_to_height,
    confusion_matrix,
    decode_labels,
    height_to_channel,
    miou_from_confusion,
)
from .mapstore import TileStore, fetch_prior, update
from .raycast import MaskedLogits, apply_visibility, visibility_mask

__all__ = [
    "SceneConfig",
    "FrameObservation",
    "PipelineOptions",
    "EvalReport",
    "BenchRow",
    "generate_scene",
    "run_pipeline",
    "evaluate",
    "bench",
    "surround_rig",
    "straight_trajectory",
    "loop_trajectory",
    "onehot_logits",
    "build_truth_store",
    "train_on_frames",
    "two_pass_protocol",
]

_STATIC_BOX_CLASSES = (12, 13, 14, 15, 16)
_DYNAMIC_BOX_CLASSES = (2, 3, 4, 7, 10)
_DRIVABLE = 11
_LOGIT_SCALE = 10.0


@dataclass
class SceneConfig:
    """Deterministic recipe for one synthetic scene."""

    seed: int
    spec: GridSpec = field(default_factory=GridSpec.desk)
    n_static_boxes: int = 16
    n_dynamic_boxes: int = 5
    trajectory: list[Pose] = field(default_factory=list)
    occlusion_rate: float = 0.0
    noise_sigma: float = 0.0
    feature_channels: int = 32

    def __post_init__(self):
        if not 0.0 <= self.occlusion_rate <= 1.0:
            raise ValueError("occlusion_rate must lie in [0, 1]")
        if not self.trajectory:
            self.trajectory = straight_trajectory(12, spacing=2.0)
        if self.feature_channels < 1:
            raise ValueError("feature_channels must be >= 1")


@dataclass
class FrameObservation:
    """One simulated timestep: pose, camera rig, ground truth and degraded inputs."""

    pose: Pose
    cams: list[CameraModel]
    truth: LabelGrid
    current_feature: FeatureGrid
    degraded_logits: LogitsGrid


@dataclass
class PipelineOptions:
    baseline: bool = False


def straight_trajectory(n: int, spacing: float = 2.0, start: tuple[float, float] = (0.0, 0.0), yaw: float = 0.0) -> list[Pose]:
    c, s = math.cos(yaw), math.sin(yaw)
    return [Pose.from_xyyaw(start[0] + i * spacing * c, start[1] + i * spacing * s, yaw) for i in range(n)]


def loop_trajectory(n: int, spacing: float = 2.0, lane_offset: float = 1.5) -> list[Pose]:
    """Out-and-back loop on two lanes; revisits the corridor from both headings."""
    half = max(1, n // 2)
    length = (half - 1) * spacing
    out = [Pose.from_xyyaw(i * spacing, -lane_offset, 0.0) for i in range(half)]
    back = [Pose.from_xyyaw(length - i * spacing, lane_offset, math.pi) for i in range(n - half)]
    return out + back


def surround_rig(spec: GridSpec, width: int = 64, height: int = 48) -> list[CameraModel]:
    """Six pinhole cameras at 60 degree yaw spacing, 90 degree HFOV, 1.5 m above the grid floor."""
    fx = (width / 2.0) / math.tan(math.radians(45.0))
    k = np.array([[fx, 0.0, (width - 1) / 2.0], [0.0, fx, (height - 1) / 2.0], [0.0, 0.0, 1.0]])
    base = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    z_mount = spec.p_min[2] + 1.5
    cams = []
    for idx in range(6):
        yaw = math.radians(60.0 * idx)
        c, s = math.cos(yaw), math.sin(yaw)
        rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        m = np.eye(4)
        m[:3, :3] = rz @ base
        m[:3, 3] = (0.5 * c, 0.5 * s, z_mount)
        cams.append(CameraModel(k=k, cam_to_ego=Pose(m), width=width, height=height))
    return cams


def onehot_logits(labels: LabelGrid, scale: float = _LOGIT_SCALE) -> LogitsGrid:
    eye = np.eye(labels.spec.n_classes, dtype=np.float32) * scale
    return LogitsGrid(labels.spec, eye[labels.labels])


def _world_spec(config: SceneConfig) -> GridSpec:
    spec = config.spec
    xs = [p.translation[0] for p in config.trajectory]
    ys = [p.translation[1] for p in config.trajectory]
    half_x = abs(spec.p_min[0]) + spec.dims[0] * spec.v_size
    half_y = abs(spec.p_min[1]) + spec.dims[1] * spec.v_size
    x0 = min(xs) - half_x
    y0 = min(ys) - half_y
    nx = int(math.ceil((max(xs) - min(xs) + 2 * half_x) / spec.v_size))
    ny = int(math.ceil((max(ys) - min(ys) + 2 * half_y) / spec.v_size))
    return GridSpec(
        p_min=(x0, y0, spec.p_min[2]),
        v_size=spec.v_size,
        dims=(nx, ny, spec.dims[2]),
        n_classes=spec.n_classes,
        l_free=spec.l_free,
    )


def _stamp_box(labels: np.ndarray, spec: GridSpec, center, half, z_top: float, cls: int) -> None:
    lo = [center[0] - half[0], center[1] - half[1], spec.p_min[2]]
    hi = [center[0] + half[0], center[1] + half[1], spec.p_min[2] + z_top]
    idx0 = []
    idx1 = []
    for a in range(3):
        i0 = int(math.floor((lo[a] - spec.p_min[a]) / spec.v_size))
        i1 = int(math.ceil((hi[a] - spec.p_min[a]) / spec.v_size))
        idx0.append(max(0, i0))
        idx1.append(min(spec.dims[a], i1))
    if all(i1 > i0 for i0, i1 in zip(idx0, idx1)):
        labels[idx0[0] : idx1[0], idx0[1] : idx1[1], idx0[2] : idx1[2]] = cls


def _crop_world(world: np.ndarray, world_spec: GridSpec, pose: Pose, spec: GridSpec) -> LabelGrid:
    centers = spec.voxel_centers().reshape(-1, 3)
    points = pose.apply(centers)
    g = (points - np.asarray(world_spec.p_min)) / world_spec.v_size
    idx = np.floor(g).astype(np.int64)
    ok = np.all((idx >= 0) & (idx < np.asarray(world_spec.dims)), axis=-1)
    out = np.full(len(points), spec.l_free, dtype=np.int64)
    out[ok] = world[idx[ok, 0], idx[ok, 1], idx[ok, 2]]
    return LabelGrid(spec, out.reshape(spec.dims))


def generate_scene(config: SceneConfig) -> tuple[LabelGrid, list[FrameObservation]]:
    """Build the static world and the per-frame observations for one scene."""
    rng = np.random.default_rng(config.seed)
    spec = config.spec
    wspec = _world_spec(config)
    h, w, z = spec.dims
    zn = spec.bev_channels

    world = np.full(wspec.dims, spec.l_free, dtype=np.int64)
    world[:, :, 0] = _DRIVABLE

    xs = [p.translation[0] for p in config.trajectory]
    ys = [p.translation[1] for p in config.trajectory]
    span_x = (min(xs) - 6.0, max(xs) + 6.0)
    span_y = (min(ys) - 8.0, max(ys) + 8.0)
    # Street-like layout: structures line both sides of the corridor in slots,
    # facing the road, so each is actually visible from nearby poses instead of
    # hiding behind the others.
    slot_pitch = (span_x[1] - span_x[0]) / max(1, (config.n_static_boxes + 1) // 2)
    for b in range(config.n_static_boxes):
        slot = b // 2
        side = 1.0 if b % 2 == 0 else -1.0
        cx = span_x[0] + (slot + 0.5) * slot_pitch + rng.uniform(-0.8, 0.8)
        cy = side * rng.uniform(4.5, 7.5) + (ys[0] if ys else 0.0)
        if b % 4 < 2:
            half = (rng.uniform(1.0, 2.0), 0.2)
            height = rng.uniform(1.8, 2.6)
        else:
            half = (rng.uniform(0.6, 1.2), rng.uniform(0.6, 1.2))
            height = rng.uniform(1.2, 2.0)
        cls = _STATIC_BOX_CLASSES[b % len(_STATIC_BOX_CLASSES)]
        _stamp_box(world, wspec, (cx, cy), half, height, cls)

    dyn = []
    for b in range(config.n_dynamic_boxes):
        # Traffic in lanes either side of the trajectory, fast enough that a
        # frame-old prior is stale for it.
        lane = (1.0 if b % 2 == 0 else -1.0) * rng.uniform(2.2, 3.8) + (ys[0] if ys else 0.0)
        base = (rng.uniform(*span_x), lane)
        vel = (rng.uniform(2.0, 3.5) * (1 if b % 2 else -1), 0.0)
        half = (rng.uniform(0.9, 1.4), rng.uniform(0.4, 0.6))
        height = rng.uniform(1.2, 1.7)
        cls = _DYNAMIC_BOX_CLASSES[b % len(_DYNAMIC_BOX_CLASSES)]
        dyn.append((base, vel, half, height, cls))

    proj = rng.normal(0.0, 1.0, size=(zn, config.feature_channels)) / math.sqrt(zn)
    cams = surround_rig(spec)
    bev_xy = spec.bev_centers()
    az = np.arctan2(bev_xy[:, :, 1], bev_xy[:, :, 0])
    eye = np.eye(spec.n_classes, dtype=np.float64) * _LOGIT_SCALE
    # Degraded sectors read as weakly free: still decode to free space, but at a
    # confidence the fusion gate can tell apart from a well-observed voxel.
    free_row = 0.4 * eye[spec.l_free]

    frames = []
    for f, pose in enumerate(config.trajectory):
        world_f = world.copy()
        for base, vel, half, height, cls in dyn:
            # Wrap moving boxes inside the populated span so they stay in play.
            px = span_x[0] + (base[0] - span_x[0] + vel[0] * f) % (span_x[1] - span_x[0])
            pos = (px, base[1] + vel[1] * f)
            _stamp_box(world_f, wspec, pos, half, height, cls)
        truth = _crop_world(world_f, wspec, pose, spec)

        clean = eye[truth.labels]
        sector_start = rng.uniform(0.0, 2.0 * math.pi)
        sector = np.mod(az - sector_start, 2.0 * math.pi) < config.occlusion_rate * 2.0 * math.pi
        clean[sector] = free_row
        noise = rng.normal(0.0, config.noise_sigma, size=clean.shape) if config.noise_sigma > 0 else 0.0
        degraded = LogitsGrid(spec, (clean + noise).astype(np.float32))

        feature = FeatureGrid(degraded.values.reshape(h, w, zn).astype(np.float64) @ proj)
        frames.append(
            FrameObservation(pose=pose, cams=cams, truth=truth, current_feature=feature, degraded_logits=degraded)
        )
    return LabelGrid(wspec, world), frames


def run_pipeline(
    frames: list[FrameObservation],
    store: TileStore,
    weights: FusionWeights,
    options: PipelineOptions | None = None,
) -> tuple[list[LabelGrid], TileStore]:
    """Per frame: fetch prior, fuse, decode, then persist the visibility-masked logits.

    Predictions are the decoded labels before masking. In baseline mode the
    gate is bypassed (fused feature = current feature) and the store is
    neither read nor written.
    """
    options = options or PipelineOptions()
    if weights.decode is None:
        raise ValueError("pipeline requires weights with a decode head")
    if not frames:
        raise ValueError("no frames")
    spec = frames[0].truth.spec
    preds = []
    for frame in frames:
        if options.baseline:
            fused = frame.current_feature
        else:
            prior, _valid = fetch_prior(store, frame.pose, spec)
            fused = fuse(frame.current_feature, prior, weights).f_agg
        logits = channel_to_height(conv2d(fused, weights.decode), spec)
        labels = decode_labels(logits)
        preds.append(labels)
        if not options.baseline:
            mask = visibility_mask(labels, frame.cams)
            update(store, frame.pose, apply_visibility(logits, mask))
    return preds, store


@dataclass
class EvalReport:
    result: MiouResult
    n_frames: int
    per_class_iou: dict[int, float]

    def key_values(self) -> str:
        lines = [
            f"frames={self.n_frames}",
            f"miou_dynamic={self.result.dynamic:.6f}",
            f"miou_static={self.result.static_:.6f}",
            f"miou_all={self.result.all_:.6f}",
        ]
        for cls in sorted(self.per_class_iou):
            lines.append(f"iou_class_{cls}={self.per_class_iou[cls]:.6f}")
        return "\n".join(lines)

    def table(self) -> str:
        lines = [
            "group    mIoU",
            "-------  ------",
            f"dynamic  {self.result.dynamic:.4f}",
            f"static   {self.result.static_:.4f}",
            f"all      {self.result.all_:.4f}",
        ]
        return "\n".join(lines)


def evaluate(preds: list[LabelGrid], truths: list[LabelGrid], partition: ClassPartition) -> EvalReport:
    """Aggregate per-voxel confusion across frames, then the dynamic/static/all mIoU triplet."""
    if not preds:
        raise ValueError("no frames to evaluate")
    if len(preds) != len(truths):
        raise ValueError(f"{len(preds)} predictions vs {len(truths)} truth frames")
    spec = preds[0].spec
    partition.validate_for(spec)
    conf = np.zeros((spec.n_classes, spec.n_classes), dtype=np.int64)
    for p, t in zip(preds, truths):
        if p.spec != t.spec:
            raise ValueError("prediction and truth use different grid specs")
        conf += confusion_matrix(p.labels, t.labels, spec.n_classes)
    result = miou_from_confusion(conf, partition, spec.l_free)

    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - np.diag(conf)
    per_class = {
        int(c): float(inter[c] / union[c])
        for c in range(spec.n_classes)
        if union[c] > 0 and c != spec.l_free
    }
    return EvalReport(result=result, n_frames=len(preds), per_class_iou=per_class)


@dataclass
class BenchRow:
    op: str
    h: int
    w: int
    c: int
    median_ms: float
    min_ms: float

    def line(self) -> str:
        return f"{self.op:<12} {self.h:>5} x {self.w:<5} C={self.c:<4} median={self.median_ms:9.3f} ms  min={self.min_ms:9.3f} ms"


def bench(sizes: list[tuple[int, int, int]], repeats: int, seed: int = 0) -> list[BenchRow]:
    """Median/min wall-clock latency of fuse() and fetch_prior() at the given plane sizes."""
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    rng = np.random.default_rng(seed)
    rows = []
    for h, w, c in sizes:
        weights = init_weights(c, c, seed=seed)
        f_c = FeatureGrid(rng.normal(size=(h, w, c)))
        prior = FeatureGrid(rng.normal(size=(h, w, c)))
        fuse(f_c, prior, weights)
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fuse(f_c, prior, weights)
            times.append((time.perf_counter() - t0) * 1e3)
        rows.append(BenchRow("fuse", h, w, c, float(np.median(times)), float(np.min(times))))

        spec = GridSpec(
            p_min=(-h * 0.2, -w * 0.2, 0.0), v_size=0.4, dims=(h, w, 1), n_classes=c, l_free=c - 1
        )
        store = TileStore(spec)
        payload_values = rng.normal(size=(h, w, 1, c)).astype(np.float32)
        payload = MaskedLogits(LogitsGrid(spec, payload_values), np.ones((h, w, 1), dtype=bool))
        pose = Pose.identity()
        update(store, pose, payload)
        fetch_prior(store, pose, spec)
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fetch_prior(store, pose, spec)
            times.append((time.perf_counter() - t0) * 1e3)
        rows.append(BenchRow("fetch_prior", h, w, c, float(np.median(times)), float(np.min(times))))
    return rows


def build_truth_store(frames: list[FrameObservation], tile_dims: tuple[int, int] = (50, 50)) -> TileStore:
    """Store populated with visibility-masked one-hot truth logits; a training teacher."""
    spec = frames[0].truth.spec
    store = TileStore(spec, tile_dims=tile_dims)
    for frame in frames:
        logits = onehot_logits(frame.truth)
        mask = visibility_mask(frame.truth, frame.cams)
        update(store, frame.pose, apply_visibility(logits, mask))
    return store


def _decode_train_step(f_c: FeatureGrid, target: FeatureGrid, weights: FusionWeights, lr: float, n_classes: int) -> float:
    """CE step on the gate-bypassed path decode(F_c); keeps the baseline comparison honest."""
    logits_bev = _conv_forward(f_c.values, weights.decode)
    h, w, zn = logits_bev.shape
    labels = _target_labels(target.values, n_classes)
    loss, d4 = _softmax_ce(logits_bev.reshape(h, w, zn // n_classes, n_classes), labels)
    _, g_decode = _conv_backward(d4.reshape(h, w, zn), f_c.values, weights.decode)
    weights.decode.kernel -= lr * g_decode.kernel
    weights.decode.bias -= lr * g_decode.bias
    return loss


def _degraded_cells(frame: FrameObservation) -> np.ndarray:
    """(H, W) mask of BEV cells whose whole column reads as low-confidence."""
    h, w, _ = frame.truth.spec.dims
    colmax = frame.degraded_logits.values.reshape(h, w, -1).max(axis=2)
    return colmax < 0.7 * _LOGIT_SCALE


def _crop_origin(rng, frame: FrameObservation, degraded: np.ndarray, ch: int, cw: int) -> tuple[int, int]:
    """Importance-sample crop origins.

    Uniform crops alone starve training: structures are a few percent of the
    scene and structure-inside-degraded-sector conflicts, the cells the gate
    exists for, are rarer still. A third of crops center on any structure cell
    and another third on a structure cell inside the degraded sector.
    """
    h, w, _ = frame.truth.spec.dims
    roll = rng.random()
    if roll < 2.0 / 3.0:
        interesting = (frame.truth.labels != frame.truth.spec.l_free) & (frame.truth.labels != _DRIVABLE)
        interesting = interesting.any(axis=2)
        if roll < 1.0 / 3.0:
            interesting = interesting & degraded
        cells = np.nonzero(interesting)
        if cells[0].size:
            pick = int(rng.integers(cells[0].size))
            i0 = int(np.clip(cells[0][pick] - ch // 2, 0, h - ch))
            j0 = int(np.clip(cells[1][pick] - cw // 2, 0, w - cw))
            return i0, j0
    return int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1))


def train_on_frames(
    frames: list[FrameObservation],
    steps: int,
    lr: float,
    seed: int,
    weights: FusionWeights | None = None,
    crop: int = 24,
    batch_size: int = 2,
    zero_prior_rate: float = 0.2,
    corrupt_prior_rate: float = 0.3,
    baseline_path_rate: float = 0.25,
    self_train_fraction: float = 0.3,
) -> tuple[FusionWeights, list[float]]:
    """Train the fusion gate and decode head against ground truth on one scene.

    Two phases. First, priors are fetched from a store of visibility-masked
    truth logits (what an earlier good traversal would have left behind), with
    random scale jitter and occasional empty priors so the gate also learns to
    fall back on current features. The remaining steps retrain on self-priors,
    i.e. on the store the pipeline itself produces with the phase-one weights,
    matching the distribution seen at inference.
    """
    spec = frames[0].truth.spec
    c = frames[0].current_feature.channels
    if weights is None:
        weights = init_weights(c, spec.bev_channels, seed)
    teacher = build_truth_store(frames)
    priors = [fetch_prior(teacher, f.pose, spec)[0] for f in frames]
    targets = [height_to_channel(onehot_logits(f.truth)) for f in frames]
    degraded = [_degraded_cells(f) for f in frames]
    h, w, _ = spec.dims
    ch, cw = min(crop, h), min(crop, w)
    rng = np.random.default_rng(seed + 1)
    losses = []
    phase1 = steps - int(self_train_fraction * steps)
    for step in range(steps):
        if step == phase1 and step < steps:
            # Refresh priors from the pipeline's own two-pass output so the gate
            # also sees the messier self-built map it will face at inference.
            store = TileStore(spec)
            run_pipeline(frames, store, weights)
            run_pipeline(frames, store, weights)
            priors = [fetch_prior(store, f.pose, spec)[0] for f in frames]
        step_lr = lr if step < phase1 else 0.25 * lr
        if rng.random() < baseline_path_rate:
            fi = int(rng.integers(len(frames)))
            i0, j0 = _crop_origin(rng, frames[fi], degraded[fi], ch, cw)
            f_c = FeatureGrid(frames[fi].current_feature.values[i0 : i0 + ch, j0 : j0 + cw])
            target = FeatureGrid(targets[fi].values[i0 : i0 + ch, j0 : j0 + cw])
            losses.append(_decode_train_step(f_c, target, weights, step_lr, spec.n_classes))
            continue
        batch = []
        for _ in range(batch_size):
            fi = int(rng.integers(len(frames)))
            i0, j0 = _crop_origin(rng, frames[fi], degraded[fi], ch, cw)
            f_c = FeatureGrid(frames[fi].current_feature.values[i0 : i0 + ch, j0 : j0 + cw])
            roll = rng.random()
            scale = rng.uniform(0.6, 1.5)
            if roll < zero_prior_rate:
                prior = None
            else:
                prior_vals = scale * priors[fi].values[i0 : i0 + ch, j0 : j0 + cw]
                if roll > 1.0 - corrupt_prior_rate:
                    # Misaligned prior, truth target: teaches the gate to side with
                    # a confident current feature instead of parroting the map.
                    shift = (int(rng.integers(2, 6)), int(rng.integers(2, 6)))
                    prior_vals = np.roll(prior_vals, shift, axis=(0, 1))
                prior = FeatureGrid(prior_vals)
            target = FeatureGrid(targets[fi].values[i0 : i0 + ch, j0 : j0 + cw])
            batch.append((f_c, prior, target))
        weights, loss = train_step(batch, weights, step_lr, spec.n_classes)
        losses.append(loss)
    return weights, losses


@dataclass
class TwoPassResult:
    baseline: EvalReport
    pass1: EvalReport
    pass2: EvalReport

    def gaps(self) -> MiouResult:
        return MiouResult(
            dynamic=self.pass2.result.dynamic - self.baseline.result.dynamic,
            static_=self.pass2.result.static_ - self.baseline.result.static_,
            all_=self.pass2.result.all_ - self.baseline.result.all_,
        )

    def summary(self) -> str:
        g = self.gaps()
        lines = [
            "run        dynamic  static   all",
            "---------  -------  -------  -------",
            f"baseline   {self.baseline.result.dynamic:7.4f}  {self.baseline.result.static_:7.4f}  {self.baseline.result.all_:7.4f}",
            f"pass1      {self.pass1.result.dynamic:7.4f}  {self.pass1.result.static_:7.4f}  {self.pass1.result.all_:7.4f}",
            f"pass2      {self.pass2.result.dynamic:7.4f}  {self.pass2.result.static_:7.4f}  {self.pass2.result.all_:7.4f}",
            f"gap(p2-b)  {g.dynamic:7.4f}  {g.static_:7.4f}  {g.all_:7.4f}",
        ]
        return "\n".join(lines)


def two_pass_protocol(
    frames: list[FrameObservation],
    weights: FusionWeights,
    partition: ClassPartition | None = None,
    tile_dims: tuple[int, int] = (50, 50),
) -> TwoPassResult:
    """Current-only baseline vs first and second fused traversals of one trajectory."""
    partition = partition or ClassPartition.benchmark()
    spec = frames[0].truth.spec
    truths = [f.truth for f in frames]
    base_preds, _ = run_pipeline(frames, TileStore(spec, tile_dims=tile_dims), weights, PipelineOptions(baseline=True))
    store = TileStore(spec, tile_dims=tile_dims)
    p1_preds, store = run_pipeline(frames, store, weights)
    p2_preds, store = run_pipeline(frames, store, weights)
    return TwoPassResult(
        baseline=evaluate(base_preds, truths, partition),
        pass1=evaluate(p1_preds, truths, partition),
        pass2=evaluate(p2_preds, truths, partition),
    )
