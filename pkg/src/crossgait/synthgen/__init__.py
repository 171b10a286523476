from .dataset import (
    CONDITION_KINDS,
    MANIFEST_HEADER,
    MODALITIES,
    Condition,
    DatasetSpec,
    GaitSequence,
    ManifestRow,
    RenderSettings,
    apply_condition,
    generate_dataset,
    load_sequence,
    make_sequence,
    read_dataset_spec,
    read_manifest,
    read_pgm,
    read_xyz,
    write_pgm,
    write_xyz,
)
from .render import CameraModel, FrameError, render_silhouette, sample_point_cloud, view_axes
from .walker import (
    PARAM_RANGES,
    Capsule,
    IdentityParams,
    WalkerFrame,
    joint_angles,
    pose_at,
    sample_identity,
)

__all__ = [
    "CONDITION_KINDS", "MANIFEST_HEADER", "MODALITIES", "PARAM_RANGES", "CameraModel", "Capsule",
    "Condition", "DatasetSpec", "FrameError", "GaitSequence", "IdentityParams", "ManifestRow",
    "RenderSettings", "WalkerFrame", "apply_condition", "generate_dataset", "joint_angles",
    "load_sequence", "make_sequence", "pose_at", "read_dataset_spec", "read_manifest", "read_pgm", "read_xyz",
    "render_silhouette", "sample_identity", "sample_point_cloud", "view_axes", "write_pgm",
    "write_xyz",
]
