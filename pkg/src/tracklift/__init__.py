"""tracklift: pseudo-3D labels from multi-view keypoint tracks and a
2D multi-object tracker whose association is resolved in 3D space."""

__version__ = "0.1.0"

from .association import (
    AssignmentResult,
    EncoderWeights,
    FeatureVector,
    GNNConfig,
    SimilarityConfig,
    encode_3d,
    fuse,
    gnn_aggregate,
    similarity_matrix,
    sinkhorn_soft_assignment,
    solve_assignment,
)
from .geometry import (
    BBox2D,
    CheiralityViolation,
    PinholeIntrinsics,
    Pose,
    WorldPoint,
    camera_to_world,
    point_in_bbox,
    project,
    world_to_camera,
)
from .labeling import (
    ClusterConfig,
    GateRejected,
    PointCluster,
    PseudoLabel,
    generate_pseudo_labels,
    inter_pc,
    intra_pc,
    make_labels,
    match_clusters,
)
from .learning import (
    LossValue,
    RegressorWeights,
    TrainConfig,
    bce_association_loss,
    box_descriptor,
    l3d_loss,
    regressor_forward,
    train_regressor,
    triplet_loss,
)
from .metrics import EvalReport, clear_mot, depth_metrics, evaluate, idf1
from .pipeline import PipelineConfig, run_pipeline
from .reconstruction import (
    DegenerateGeometry,
    InsufficientObservations,
    KeypointTrack,
    LMConfig,
    ego_speed_gate,
    refine_points_lm,
    reject_outliers,
    triangulate_dlt,
)
from .scene import Scene, load_scene, write_scene
from .synth import SynthConfig, generate_synthetic_scene
from .tracker import (
    Detection,
    TrackerConfig,
    TrackEvent,
    TrackState,
    iou,
    kf_predict,
    kf_update,
    run_sequence,
    tracker_step,
)
