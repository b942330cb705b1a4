"""Motion-deblurring dynamic Gaussian splatting at desk scale.

Latent camera trajectories come from a blur-conditioned neural ODE, the
per-frame exposure from how far static points move across those latent
cameras, and everything is rendered by a small CPU Gaussian rasterizer
with analytic gradients.
"""
from .geometry import Intrinsics, Pose, ScrewAxis, compose, pose_inverse, project, screw_exp
from .scene import ControlPoints, Gaussian, GaussianArrays, SceneModel, spline_eval
from .rasterizer import RenderedImage, rasterize, render
from .grad import Adam, MlpSpec, ParamStore, finite_diff_check
from .blce import BlurScore, LatentCameraNet, LatentMode, blur_score
from .lcee import estimate_exposure, latent_timestamps
from .blursynth import SyntheticSceneSpec, oracle_blur, read_dataset, render_blurry, write_dataset
from .trainer import Model, TrainConfig, Trainer, load_model
from .evaluation import EvalReport, evaluate, pearson, psnr

__version__ = "0.1.0"
