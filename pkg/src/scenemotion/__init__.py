"""Scene-aware full-body motion estimation from sparse head/hand tracking.

A conditional diffusion model over 120-frame motion windows, jump-started
from a VAE motion prior, conditioned on raw tracking signals, periodic
alignment features and an encoded scene crop, with loss-guided sampling that
keeps the lower body out of the scene and in phase with the upper body.
"""

from .config import RunConfig, load_config, save_config
from .diffusion import ConditionBundle, Denoiser, DiffusionSchedule, ddpm_step, denoise, make_schedule, q_sample
from .guidance import GuidanceConfig, guided_correction, penetration_loss, phase_matching_loss, sample_loss
from .kinematics import (
    MotionSequence,
    Skeleton,
    default_skeleton,
    forward_kinematics,
    geometric_loss,
    matrix_to_rot6d,
    rot6d_to_matrix,
)
from .pae import PeriodicAutoencoder, PeriodicParams, phase_feature_vector, reconstruct_periodic_feature
from .prior import MotionPrior, kl_divergence, sample_initial_motion
from .sampler import ModelBundle, assemble_condition, estimate_long_sequence, estimate_motion
from .scene import ScenePointCloud, ScenePointEncoder, crop_bounding_box, encode_scene, knn_query
from .signals import SignalStats, SparseSignals, extract_anchor_signals, extract_sparse_signals

__version__ = "0.1.0"
