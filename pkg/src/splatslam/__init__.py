"""Dense RGB-D SLAM with 3D Gaussian splatting on the CPU."""

from .config import ConfigError, RunConfig, load_config
from .datasets import FrameObservation, Trajectory, associate, load_tum_rgbd, write_tum_rgbd
from .gaussian_map import (
    Gaussian, GaussianMap, InvalidParameterError, importance_weights, insert_gaussians,
    snapshot_anchors, update_importance,
)
from .geometry import (
    CameraIntrinsics, CameraPose, InvalidInputError, project_gaussian, quat_to_rotmat,
    world_to_camera,
)
from .losses import (
    LossWeights, depth_residual, l1_image, mapping_loss, regularization_loss, rgb_to_ab, ssim, tracking_loss,
)
from .mapper import DensifyThresholds, MapperConfig, densify_mask, map_frame, seed_from_depth
from .metrics import EvaluationError, ate_rmse, depth_l1, image_metrics, psnr
from .optim import Adam, adam_step
from .renderer import (
    RenderOutput, RenderSettings, composite_pixel, eval_alpha, render, render_backward,
    render_bruteforce, sort_by_depth,
)
from .slam import SlamError, SlamResult, evaluate, open_dataset, run_slam
from .synthetic import SceneSpec, TrajectorySpec, generate_synthetic
from .tracker import TrackerConfig, TrackerState, TrackingError, predict_pose, track_frame

__version__ = "0.1.0"
