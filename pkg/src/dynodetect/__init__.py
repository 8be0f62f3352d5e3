"""Dynamic-point detection for registered range-sensor streams.

Points of the middle frame of a sliding 2N+1-frame window are scored by
the temporal component of their local spatiotemporal (4D) surface normal
and thresholded into dynamic/static classes.
"""

from .cloud import (
    Cloud,
    Pose,
    TimedPoint,
    apply_registration,
    read_cloud,
    read_poses,
    read_scored_cloud,
    write_cloud,
)
from .core import (
    Params,
    ScoredCloud,
    ScoredPoint,
    SlidingMap,
    classify_cloud,
    dynamic_score,
    latency,
    push_cloud,
    score_cloud,
    spatiotemporal_covariance,
    upsample_labels,
)
from .eigen import EigenResult, jacobi_eigh, smallest_eigenvector
from .evaluation import BenchReport, EvalReport, bench, compute_iou, run_sequence
from .spatial import (
    KdIndex,
    auto_voxel_size,
    build_index,
    compute_scale,
    downsample,
    radius_query,
)
from .synthetic import (
    Box,
    LabeledCloud,
    Mover,
    Plane,
    SceneSpec,
    SensorModel,
    Sphere,
    generate,
    load_scene,
    moving_plane_oracle,
)

__version__ = "0.1.0"
