"""Differentially private training toolkit.

Per-sample gradient computation on a small autodiff core, L2 clipping,
calibrated Gaussian noise, Renyi-DP accounting with (epsilon, delta)
conversion, a noisy Adam optimizer, and an experiment harness for
privacy/utility sweeps.
"""

from .accountant import (
    CalibrationError,
    MechanismSpec,
    PrivacyLedger,
    PrivacySpent,
    RdpCurve,
    accountant_query,
    calibrate_sigma,
    classic_gaussian_sigma,
    compose,
    kl_divergence,
    mechanism_curve,
    renyi_divergence,
    rdp_gaussian,
    rdp_subsampled_gaussian,
    to_eps_delta,
)
from .config import ConfigError, RunConfig, SweepGrid, parse_config_file
from .data import Dataset, load_csv_dataset, save_csv_dataset, synthetic_dataset
from .mechanisms import ClipSpec, NoiseSpec, aggregate_noisy, clip_gradient, gaussian_noise
from .model import (
    Model,
    ModelValidationError,
    ValidationReport,
    accuracy,
    batch_gradient,
    build_mlp,
    load_checkpoint,
    per_sample_gradient,
    save_checkpoint,
    validate_model,
)
from .optim import DpAdamState, StepOutcome, adam_step, dp_adam_step, poisson_subsample
from .tensor import (
    GradientSet,
    Tape,
    Tensor,
    backward,
    fd_gradient,
    forward_primitive,
    tensor,
)
from .train import TrainReport, sweep, train

__version__ = "0.1.0"
