"""2D-to-3D human pose lifting with hop-wise graph attention and limb-group refinement."""

from .config import ConfigError, HopFIRConfig, TrainConfig, apply_overrides, parse_config, serialize_config
from .data import CameraModel, DataError, PoseSample, load_dataset, normalize_sample, synth_poses, write_dataset
from .metrics import EvalReport, mpjpe, p_mpjpe, pck_auc, pose_loss
from .model import HopFIRModel, build_model, load_checkpoint, save_checkpoint
from .skeleton import SkeletonGraph, build_skeleton, default_skeleton, hop_matrix, limb_groups, normalize_affinity
from .tensor import Rng, Tape, Tensor, backward, grad_check
from .training import Adam, NonFiniteLossError, evaluate, lr_at, train

__version__ = "0.1.0"
