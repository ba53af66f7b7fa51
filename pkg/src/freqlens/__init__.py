"""freqlens: masked-spectrum pretraining losses and separation metrics."""

from .freqloss import (
    CaseWeights,
    LossConfig,
    block_loss,
    block_losses,
    case_mixture_coefficient,
    case_weights,
    focal_loss,
    mean_loss,
    scaled_batch_loss,
)
from .masking import MaskPlan, RatioSchedule, case_counts, counterpart, next_ratio, sample_mask
from .numopt import PowellConfig, lasso_cd, pinv, powell_minimize
from .separation import (
    FeatureSet,
    RhoReport,
    RobustFit,
    distance,
    fit_hyperplane,
    fit_robust,
    fit_theta,
    pca_project,
    residualize,
    rho_index,
)
from .spectra import MagnitudeGrid, PatchGrid, magnitude_spectrum, normalize_grid, patchify, unpatchify
from .specstats import (
    Chi2Spec,
    ScalingTable,
    bessel_i,
    build_scaling_table,
    estimate_chi2_spec,
    focal_expectation,
    mmd,
    nc_chi2_pdf,
    pearson,
)
from .toymae import (
    CaseErrorReport,
    ToyModel,
    TrainState,
    backward,
    case_error_report,
    forward,
    gmu_fuse,
    init_model,
    synthetic_spectra,
    train,
)

__version__ = "0.1.0"
