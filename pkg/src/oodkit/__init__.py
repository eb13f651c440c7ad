"""Out-of-distribution detection with angular-margin heads and diffusion-generated
label-mixup outliers, at desk scale in numpy."""

__version__ = "0.1.0"

from .nn import Rng, Mlp, init_mlp, mlp_forward, mlp_backward, finite_diff_grad  # noqa: E402
from .losses import MetricHead, make_head, head_loss, outlier_exposure_loss, adacos_scale  # noqa: E402
from .scores import msp_score, energy_score, mahalanobis_score, max_cosine_score, fit_gaussian_stats  # noqa: E402
from .evaluation import auroc, aupr, threshold_at_tpr, detect, closed_set_accuracy  # noqa: E402
from .config import ExperimentConfig, load_config  # noqa: E402
