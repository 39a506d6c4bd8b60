"""Self-supervised LiDAR scene flow: losses, classification, clustering,
direct flow optimization, metrics, and synthetic verification scenes."""

from .clustering import ClusterConfig, ClusterSet, cluster_dynamic
from .geometry import (
    NearestNeighborIndex,
    PointCloud,
    RigidTransform,
    apply_transform,
    build_index,
    ego_flow,
    nn_distance,
    relative_motion,
)
from .losses import (
    ClusterTarget,
    LossInputs,
    LossReport,
    LossWeights,
    ablation_cluster_target,
    ablation_ds_loss,
    chamfer_loss,
    cluster_loss,
    cluster_targets,
    dynamic_chamfer_loss,
    static_loss,
    total_loss,
)
from .metrics import EpeReport, EvalConfig, epe, epe_three_way
from .occupancy import ClassifierConfig, OccupancyGrid, VoxelEvidence, label_sequence
from .solver import SolveTrace, SolverConfig, SolverNumericalError, solve
from .synth import (
    BoxMover,
    GroundPatch,
    LabeledFrame,
    Pole,
    SceneSpec,
    SensorModel,
    Wall,
    ablation_suite,
    classifier_suite,
    ego_motion_between,
    fig3_scenario,
    generate,
    scene_spec_from_dict,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
