"""torsofit: fit an articulated, blendshape-enriched torso template to
partial surface scans and transfer surgical pattern curves onto them."""

from .config import RunConfig
from .energy import EnergyWeights
from .evaluation import (DistanceStats, TransferredPattern, distance_stats,
                         landmark_error, surface_error, sweep_blendshapes,
                         sweep_landmarks, sweep_lambda, transfer_patterns)
from .geometry import (PatternCurve, SurfaceAnchor, TriangleMesh, load_mesh,
                       save_mesh)
from .manifest import (load_ground_truth, load_model, save_ground_truth,
                       save_model, save_target)
from .rig import BlendWeights, Bone, PoseParams, Skeleton
from .shape import (BlendshapeSet, DeformableModel, deform, deform_vertices,
                    truncate_blendshapes)
from .solver import (RegistrationResult, SolverConfig,
                     initialize_from_landmarks, register)
from .spatial import FilterConfig, Octree, ScanIndex, find_correspondences
from .synth import (PoseRange, SyntheticTarget, TorsoSpec, evaluate_recovery,
                    generate_target, generate_template)

__version__ = "0.1.0"

__all__ = [
    "BlendWeights", "BlendshapeSet", "Bone", "DeformableModel",
    "DistanceStats", "EnergyWeights", "FilterConfig", "Octree",
    "PatternCurve", "PoseParams", "PoseRange", "RegistrationResult",
    "RunConfig", "ScanIndex", "Skeleton", "SolverConfig", "SurfaceAnchor",
    "SyntheticTarget", "TorsoSpec", "TransferredPattern", "TriangleMesh",
    "deform", "deform_vertices", "distance_stats", "evaluate_recovery",
    "find_correspondences", "generate_target", "generate_template",
    "initialize_from_landmarks", "landmark_error", "load_ground_truth",
    "load_mesh", "load_model", "register", "save_ground_truth", "save_mesh",
    "save_model", "save_target", "surface_error", "sweep_blendshapes",
    "sweep_landmarks", "sweep_lambda", "transfer_patterns",
    "truncate_blendshapes",
]
