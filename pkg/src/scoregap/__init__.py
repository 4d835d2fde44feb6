"""scoregap: a diffusion-sampling lab for measuring and shrinking the gap
between deployed score estimators and the true score along inference
trajectories, with guided sampling, optimal-weight estimation, and
per-step prediction refinement, all checked against analytic
Gaussian-mixture oracles."""

from .fields import (
    MlpScoreField,
    MlpScoreModel,
    OracleScoreField,
    PerturbationSpec,
    PerturbedScoreField,
    ScoreField,
    eps_from_score,
    init_mlp,
    mlp_forward,
    mlp_train_step,
    oracle_field,
    perturbed_field,
    score_from_eps,
    train_mlp,
)
from .gap import (
    GapReport,
    GapStep,
    accumulated_gap,
    aggregate_reports,
    knn_precision_recall,
    mean_deviation,
    mean_deviation_coefficient,
    mmd_rbf,
    pointwise_gap,
    sliced_wasserstein,
)
from .guidance import (
    GuidanceSpec,
    GuidedScoreField,
    OmegaEstimate,
    cfg_combine,
    cg_combine,
    l_of_omega,
    omega_star,
)
from .mixture import (
    ConditionedMixtureFamily,
    GaussianMixture,
    classifier,
    diffused,
    load_family,
    log_density,
    preset_family,
    score,
)
from .mixture import sample as sample_mixture
from .persist import (
    RunManifest,
    load_checkpoint,
    load_manifest,
    save_checkpoint,
    save_manifest,
)
from .refine import RefineConfig, RefineTrace, converged, refine_loop, refine_objective
from .sampler import (
    SamplerConfig,
    Trajectory,
    ddim_step,
    ddpm_step,
    langevin_correct,
    mu_tilde,
    sample_batch,
    sample_chain,
    timestep_sequence,
)
from .schedule import NoiseSchedule, forward_marginal, forward_step, linear_schedule

__version__ = "0.1.0"
