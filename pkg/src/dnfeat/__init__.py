"""Diffusion noise features for telling generated images from real ones."""

__version__ = "0.1.0"

from ._validation import (  # noqa: E402
    DNFError,
    FormatError,
    MetricError,
    ParameterError,
    StageError,
    TrainingError,
    TransportError,
)
from .analysis import (  # noqa: E402
    PCAEmbedding,
    SpectrumMap,
    class_separation,
    mean_log_spectrum,
    pca_embed,
    spectral_flatness,
)
from .detector import DnfDetector, EvalReport, accuracy, average_precision, evaluate, train_detector  # noqa: E402
from .diffusion import generate, generate_step, invert, invert_step  # noqa: E402
from .dnf import DNFExtractor, DnfConfig, DnfFeature, extract_batch, extract_dnf, fuse  # noqa: E402
from .perturb import GaussianBlur, JpegRoundtrip, PerturbationSpec, gaussian_blur, jpeg_roundtrip  # noqa: E402
from .predictor import (  # noqa: E402
    AnalyticGaussianPredictor,
    ConstantPredictor,
    ExternalPredictor,
    TinyDenoiser,
    analytic_predict,
    train_predictor,
)
from .schedule import NoiseSchedule, make_linear_schedule, sample_timesteps  # noqa: E402

__all__ = [
    "AnalyticGaussianPredictor", "ConstantPredictor", "DNFError", "DNFExtractor", "DnfConfig",
    "DnfDetector", "DnfFeature", "EvalReport", "ExternalPredictor", "FormatError", "GaussianBlur",
    "JpegRoundtrip", "MetricError", "NoiseSchedule", "PCAEmbedding", "ParameterError",
    "PerturbationSpec", "SpectrumMap", "StageError", "TinyDenoiser", "TrainingError",
    "TransportError", "accuracy", "analytic_predict", "average_precision", "class_separation", "evaluate",
    "extract_batch", "extract_dnf", "fuse", "gaussian_blur", "generate", "generate_step",
    "invert", "invert_step", "jpeg_roundtrip", "make_linear_schedule", "mean_log_spectrum",
    "pca_embed", "sample_timesteps", "spectral_flatness", "train_detector", "train_predictor",
]
