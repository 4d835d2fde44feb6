"""Reverse-process generation: ancestral, deterministic, and corrected steps.

Three samplers over a shared mean computation:

* ddpm        -- ancestral steps with posterior noise scale
                 sigma_t^2 = (beta_bar_prev / beta_bar_t) * beta_eff
* ddim        -- the fully deterministic variant (same mean, no noise)
* pc_langevin -- ddpm predictor plus signal-to-noise-tuned Langevin
                 corrector sweeps at each visited step

Subsequence sampling (steps < T) uses evenly spaced timesteps including
t=1, with the effective per-transition beta 1 - alpha_bar_t/alpha_bar_prev.

Chains derive all randomness from a single integer seed through a fixed
SeedSequence spawn layout (one child for the start state, then a
refinement child and a step child per transition), so any recorded step
can be replayed bit-for-bit in isolation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fields import ScoreField, eps_from_score, score_from_eps
from .guidance import GuidanceSpec, GuidedScoreField
from .mixture import ConditionLabel
from .refine import RefineConfig, RefineTrace, refine_loop
from .schedule import NoiseSchedule

SAMPLER_KINDS = ("ddpm", "ddim", "pc_langevin")

# step-size cap for the Langevin corrector when the score vanishes
LANGEVIN_DELTA_CAP = 1.0


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "ddim"
    steps: int = 50
    corrector_iters: int = 0
    snr_target: float = 0.16

    def __post_init__(self):
        if self.kind not in SAMPLER_KINDS:
            raise ValueError(f"unknown sampler kind {self.kind!r}; known: {SAMPLER_KINDS}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.kind == "pc_langevin" and self.corrector_iters < 1:
            raise ValueError("pc_langevin requires corrector_iters >= 1")
        if self.snr_target < 0:
            raise ValueError("snr_target must be >= 0")

    def to_config(self) -> dict:
        return {
            "kind": self.kind,
            "steps": self.steps,
            "corrector_iters": self.corrector_iters,
            "snr_target": self.snr_target,
        }


def timestep_sequence(T: int, steps: int) -> list[int]:
    """Descending visit order, evenly spaced over {1..T} with t=1 included."""
    if steps < 1 or steps > T:
        raise ValueError(f"steps must be in [1, {T}], got {steps}")
    if steps == 1:
        return [T]
    ts = np.unique(np.round(np.linspace(1, T, steps)).astype(int))
    return [int(t) for t in ts[::-1]]


def mu_tilde(
    s: NoiseSchedule, t: int, x_t: np.ndarray, x0_hat: np.ndarray, t_prev: int | None = None
) -> np.ndarray:
    """Posterior mean sqrt(ab_prev) x0 + sqrt(bb_prev) (x_t - sqrt(ab_t) x0) / sqrt(bb_t)."""
    if t_prev is None:
        t_prev = t - 1
    ab_t, bb_t = s.alpha_bar_at(t), s.beta_bar_at(t)
    ab_p, bb_p = s.alpha_bar_at(t_prev), s.beta_bar_at(t_prev)
    x_t = np.asarray(x_t, dtype=np.float64)
    x0_hat = np.asarray(x0_hat, dtype=np.float64)
    return np.sqrt(ab_p) * x0_hat + np.sqrt(bb_p) * (x_t - np.sqrt(ab_t) * x0_hat) / np.sqrt(bb_t)


def predict_x0(s: NoiseSchedule, t: int, x_t: np.ndarray, eps_pred: np.ndarray) -> np.ndarray:
    """Invert the forward marginal: x0_hat = (x_t - sqrt(bb_t) eps) / sqrt(ab_t)."""
    return (np.asarray(x_t, dtype=np.float64) - np.sqrt(s.beta_bar_at(t)) * eps_pred) / np.sqrt(
        s.alpha_bar_at(t)
    )


def posterior_sigma(s: NoiseSchedule, t: int, t_prev: int | None = None) -> float:
    """Ancestral noise scale; zero at the final transition (beta_bar_0 = 0)."""
    if t_prev is None:
        t_prev = t - 1
    bb_t = s.beta_bar_at(t)
    bb_p = s.beta_bar_at(t_prev)
    beta_eff = 1.0 - s.alpha_bar_at(t) / s.alpha_bar_at(t_prev)
    return float(np.sqrt((bb_p / bb_t) * beta_eff))


def _ancestral_mean(
    s: NoiseSchedule, t: int, x_t: np.ndarray, eps_pred: np.ndarray, sigma2: float, t_prev: int
) -> np.ndarray:
    """sqrt(ab_prev) x0_hat + sqrt(bb_prev - sigma^2) eps; at sigma=0 this IS the
    deterministic map (mu_tilde with the eps-derived x0), so ddpm and ddim share
    the mean path bit-for-bit when the noise scale is forced to zero."""
    x0_hat = predict_x0(s, t, x_t, eps_pred)
    bb_p = s.beta_bar_at(t_prev)
    return np.sqrt(s.alpha_bar_at(t_prev)) * x0_hat + np.sqrt(max(bb_p - sigma2, 0.0)) * eps_pred


def ddpm_step(
    s: NoiseSchedule,
    t: int,
    x_t: np.ndarray,
    eps_pred: np.ndarray,
    rng: np.random.Generator,
    t_prev: int | None = None,
) -> np.ndarray:
    """One ancestral reverse step; noise is suppressed at the final transition.

    The retained eps coefficient shrinks to sqrt(bb_prev - sigma_t^2) so the
    injected sigma_t z replaces, rather than adds to, that much dispersion;
    keeping the full deterministic-map mean under sigma_t noise over-disperses
    every marginal.
    """
    if t_prev is None:
        t_prev = t - 1
    if t_prev == 0:
        return _ancestral_mean(s, t, x_t, eps_pred, 0.0, t_prev)  # collapses to x0_hat
    sigma = posterior_sigma(s, t, t_prev)
    mean = _ancestral_mean(s, t, x_t, eps_pred, sigma * sigma, t_prev)
    return mean + sigma * rng.standard_normal(np.shape(mean))


def ddim_step(
    s: NoiseSchedule, t: int, x_t: np.ndarray, eps_pred: np.ndarray, t_prev: int | None = None
) -> np.ndarray:
    """Deterministic reverse step: the sigma=0 member of the ancestral family."""
    if t_prev is None:
        t_prev = t - 1
    return _ancestral_mean(s, t, x_t, eps_pred, 0.0, t_prev)


def langevin_correct(
    field: ScoreField,
    x: np.ndarray,
    t: int,
    c: ConditionLabel,
    snr_target: float,
    iters: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Langevin sweeps at fixed t: x <- x + delta * score + sqrt(2 delta) * z.

    The step size adapts per sweep, delta = 2 (snr_target ||z|| / ||score||)^2
    with the norms taken over the whole state (a batch counts as one state, so
    delta is a shared scalar; per-row steps are unstable wherever the score
    vanishes). delta is capped at LANGEVIN_DELTA_CAP so a zero score yields
    pure diffusion rather than an infinite step.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    x = np.array(x, dtype=np.float64)
    for _ in range(iters):
        z = rng.standard_normal(x.shape)
        g = field.score_at(x, t, c)
        g_norm = float(np.linalg.norm(g))
        z_norm = float(np.linalg.norm(z))
        if g_norm == 0.0:
            delta = LANGEVIN_DELTA_CAP
        else:
            delta = min(2.0 * (snr_target * z_norm / g_norm) ** 2, LANGEVIN_DELTA_CAP)
        x = x + delta * g + np.sqrt(2.0 * delta) * z
    return x


@dataclass
class StepRecord:
    """What happened at one reverse transition t -> t_prev."""

    t: int
    t_prev: int
    eps_used: np.ndarray
    refine_trace: RefineTrace | None = None
    s_cond: np.ndarray | None = None
    s_null: np.ndarray | None = None
    omega_used: float | None = None
    gap_used: float | None = None
    l_at_1: float | None = None
    l_at_omega: float | None = None


@dataclass
class Trajectory:
    """A seeded reverse run: states x_T..x_0 plus per-step records."""

    seed: int
    condition: ConditionLabel
    guidance: GuidanceSpec
    schedule: NoiseSchedule
    timesteps: list[int]
    states: list[np.ndarray] = field(default_factory=list)
    records: list[StepRecord] = field(default_factory=list)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def _transitions(timesteps: list[int]) -> list[tuple[int, int]]:
    return [
        (t, timesteps[i + 1] if i + 1 < len(timesteps) else 0)
        for i, t in enumerate(timesteps)
    ]


def chain_generators(seed: int, n_steps: int) -> tuple[np.random.Generator, list[tuple[np.random.Generator, np.random.Generator]]]:
    """The chain's fixed randomness layout: (init rng, [(refine rng, step rng)])."""
    children = np.random.SeedSequence(seed).spawn(1 + 2 * n_steps)
    init = np.random.default_rng(children[0])
    per_step = [
        (np.random.default_rng(children[1 + 2 * i]), np.random.default_rng(children[2 + 2 * i]))
        for i in range(n_steps)
    ]
    return init, per_step


def step_generator(seed: int, n_steps: int, i: int) -> np.random.Generator:
    """The step rng of transition i, reconstructed for replay."""
    return chain_generators(seed, n_steps)[1][i][1]


def sample_chain(
    schedule: NoiseSchedule,
    field: ScoreField,
    guidance: GuidanceSpec,
    sampler: SamplerConfig,
    c: ConditionLabel,
    seed: int,
    refine: RefineConfig | None = None,
    oracle: ScoreField | None = None,
    omega_by_t: dict[int, float] | None = None,
) -> Trajectory:
    """Run one full reverse chain from x_T ~ N(0, I).

    The guided score is converted to a noise prediction, optionally run
    through the refinement loop, then consumed by the configured step
    function. When an oracle field is supplied, each record carries the
    realized squared score gap of the prediction actually used, plus the
    deviation at weight 1 and at the weight used (from the raw field
    evaluations at the visited state).
    """
    timesteps = timestep_sequence(schedule.T, sampler.steps)
    transitions = _transitions(timesteps)
    guided = GuidedScoreField(field, guidance, omega_by_t)
    rng_init, per_step = chain_generators(seed, len(transitions))

    x = rng_init.standard_normal(field.dim)
    traj = Trajectory(seed=seed, condition=c, guidance=guidance,
                      schedule=schedule, timesteps=timesteps, states=[x.copy()])
    for i, (t, t_prev) in enumerate(transitions):
        rng_refine, rng_step = per_step[i]
        try:
            s_cond = field.score_at(x, t, c)
            s_null = field.score_at(x, t, None) if field.has_null_condition else None
            guided_score = guided.score_at(x, t, c)
            eps = eps_from_score(guided_score, schedule, t)
            trace = None
            if refine is not None:
                eps, trace = refine_loop(eps, refine, rng_refine)

            rec = StepRecord(t=t, t_prev=t_prev, eps_used=eps.copy(), refine_trace=trace,
                             s_cond=s_cond, s_null=s_null, omega_used=guided.omega_at(t))
            if oracle is not None:
                oracle_cond = oracle.score_at(x, t, c)
                used_score = score_from_eps(eps, schedule, t)
                rec.gap_used = float(np.sum((used_score - oracle_cond) ** 2))
                rec.l_at_1 = float(np.sum((s_cond - oracle_cond) ** 2))
                rec.l_at_omega = float(np.sum((guided_score - oracle_cond) ** 2))
            traj.records.append(rec)

            if sampler.kind == "ddim":
                x = ddim_step(schedule, t, x, eps, t_prev)
            else:
                x = ddpm_step(schedule, t, x, eps, rng_step, t_prev)
                if sampler.kind == "pc_langevin" and t_prev >= 1:
                    x = langevin_correct(guided, x, t_prev, c, sampler.snr_target,
                                         sampler.corrector_iters, rng_step)
            traj.states.append(x.copy())
        except Exception as exc:
            # keep the original type, append the step context to the message
            head = str(exc.args[0]) if exc.args else exc.__class__.__name__
            exc.args = (f"{head} [at transition t={t} -> {t_prev}, step index {i}]",) + exc.args[1:]
            raise
    return traj


def sample_batch(
    schedule: NoiseSchedule,
    field: ScoreField,
    guidance: GuidanceSpec,
    sampler: SamplerConfig,
    c: ConditionLabel,
    n_chains: int,
    seed: int,
    omega_by_t: dict[int, float] | None = None,
) -> np.ndarray:
    """Vectorized plain sampling: n_chains final states, no refinement.

    One generator drives the whole batch, so results are deterministic in
    (seed, config) but do not match per-chain sample_chain runs.
    """
    guided = GuidedScoreField(field, guidance, omega_by_t)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    x = rng.standard_normal((n_chains, field.dim))
    for t, t_prev in _transitions(timestep_sequence(schedule.T, sampler.steps)):
        eps = eps_from_score(guided.score_at(x, t, c), schedule, t)
        if sampler.kind == "ddim":
            x = ddim_step(schedule, t, x, eps, t_prev)
        else:
            x = ddpm_step(schedule, t, x, eps, rng, t_prev)
            if sampler.kind == "pc_langevin" and t_prev >= 1:
                x = langevin_correct(guided, x, t_prev, c, sampler.snr_target,
                                     sampler.corrector_iters, rng)
    return x
