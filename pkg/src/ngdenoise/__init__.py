"""Two-stage noise-guided image denoiser with a noise simulator and quality metrics."""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.0.0"

from .imagecore import load_png, save_png, to_lab
from .model import ModelConfig, TwoStageDenoiser, count_params
from .noisesim import NoiseSpec, Pattern, simulate

__all__ = ["__version__", "load_png", "save_png", "to_lab", "ModelConfig", "TwoStageDenoiser",
           "count_params", "NoiseSpec", "Pattern", "simulate"]
