"""Camera pose estimation for RGB-D frames by inverting a differentiable radiance field."""

from .field import AnalyticField, LowpassField, SceneSpec, VoxelField, load_scene, lowpass_field
from .lie import Pose, exp, log, oplus, pose_errors, sample_perturbation
from .objective import LossConfig, RgbdFrame, evaluate
from .optimizer import NumericalAbort, OptimizerConfig, TrialResult, run
from .render import Camera, render_image

__all__ = [
    "AnalyticField", "Camera", "LossConfig", "LowpassField", "NumericalAbort", "OptimizerConfig", "Pose",
    "RgbdFrame", "SceneSpec", "TrialResult", "VoxelField", "evaluate", "exp", "load_scene", "log",
    "lowpass_field", "oplus", "pose_errors", "render_image", "run", "sample_perturbation",
]
