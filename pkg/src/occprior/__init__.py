"""Tiled global occupancy priors for local 3D semantic occupancy prediction.

The package covers the full loop: fetch a spatially aligned prior from a
sparse tile map, fuse it with current BEV features through a learned gate,
decode occupancy logits, mask them by camera visibility, write them back to
the map, and render dense depth from occupancy by ray casting.
"""

from .grid import (
    ClassPartition,
    FeatureGrid,
    GridSpec,
    LabelGrid,
    LogitsGrid,
    MiouResult,
    channel_to_height,
    decode_labels,
    height_to_channel,
    miou,
)
from .geometry import (
    CameraModel,
    Pose,
    TileKey,
    camera_point_to_ego,
    global_to_local,
    local_to_global,
    pixel_ray,
    tile_of,
    voxel_index,
)
from .raycast import (
    DepthMap,
    MaskedLogits,
    SamplingParams,
    VisibilityMask,
    apply_visibility,
    render_depth,
    visibility_mask,
)
from .fusion import (
    ConvLayer,
    FusionOutput,
    FusionWeights,
    conv2d,
    fuse,
    fuse_backward,
    init_weights,
    load_weights,
    save_weights,
    train_step,
)
from .mapstore import (
    Tile,
    TileStore,
    UpdateRecord,
    export_ply,
    fetch_prior,
    load_store,
    merge_agents,
    remove_dynamic_v1,
    remove_dynamic_v2,
    save_store,
    update,
)
from .harness import (
    FrameObservation,
    PipelineOptions,
    SceneConfig,
    bench,
    evaluate,
    generate_scene,
    run_pipeline,
)
from .estimators import GatedPriorFusion

__version__ = "0.1.0"

__all__ = [
    "ClassPartition", "FeatureGrid", "GridSpec", "LabelGrid", "LogitsGrid", "MiouResult",
    "channel_to_height", "decode_labels", "height_to_channel", "miou",
    "CameraModel", "Pose", "TileKey", "camera_point_to_ego", "global_to_local",
    "local_to_global", "pixel_ray", "tile_of", "voxel_index",
    "DepthMap", "MaskedLogits", "SamplingParams", "VisibilityMask",
    "apply_visibility", "render_depth", "visibility_mask",
    "ConvLayer", "FusionOutput", "FusionWeights", "conv2d", "fuse", "fuse_backward",
    "init_weights", "load_weights", "save_weights", "train_step",
    "Tile", "TileStore", "UpdateRecord", "export_ply", "fetch_prior", "load_store",
    "merge_agents", "remove_dynamic_v1", "remove_dynamic_v2", "save_store", "update",
    "FrameObservation", "PipelineOptions", "SceneConfig", "bench", "evaluate",
    "generate_scene", "run_pipeline",
    "GatedPriorFusion",
]
