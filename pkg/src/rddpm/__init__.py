"""Regional denoising diffusion for speckle removal at arbitrary image sizes."""

from .denoiser import ConstantZero, OracleGaussian, TinyCNN, TrainConfig
from .regional import WindowPlan, plan_windows, regional_despeckle, regional_epsilon
from .sampler import SamplerConfig, sample
from .schedule import NoiseSchedule, build_linear_schedule

__all__ = [
    "ConstantZero",
    "NoiseSchedule",
    "OracleGaussian",
    "SamplerConfig",
    "TinyCNN",
    "TrainConfig",
    "WindowPlan",
    "build_linear_schedule",
    "plan_windows",
    "regional_despeckle",
    "regional_epsilon",
    "sample",
]
