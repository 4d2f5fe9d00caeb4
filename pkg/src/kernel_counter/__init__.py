"""Object counting in color micrographs with a kernel-smoother regressor."""
from .imgcore import ColorHistogram, extract_features, load_image
from .kc import KernelModel, LabeledExample, Prediction, predict, smooth
from .tune import TuneConfig, loo_cv

__all__ = [
    "ColorHistogram",
    "KernelModel",
    "LabeledExample",
    "Prediction",
    "TuneConfig",
    "extract_features",
    "load_image",
    "loo_cv",
    "predict",
    "smooth",
]
__version__ = "0.1.0"
