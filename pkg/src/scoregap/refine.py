"""Per-step inference-time optimization of the guided noise prediction.

Each reverse step may iterate the guided prediction toward a standard
normal reference draw under the objective ||prediction - reference||^2.
The printed form of this loop ascends that objective; ascent on a convex
quadratic diverges, so descent is the default and the ascending variant
is kept behind ``sign="ascent_as_printed"`` so the literal loop can be
executed and its divergence demonstrated.

With a fixed reference draw and descent at step scale eta, the objective
contracts by exactly (1 - 2 eta)^2 per iteration; resampling the
reference each iteration (the default) keeps the loop stochastic and
relies on the iteration cap for termination.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SIGNS = ("descent", "ascent_as_printed")
EPS_MODES = ("resample_each_iter", "fixed_draw")
CONVERGENCE_RULES = ("loss_delta", "grad_norm")


class RefineDivergedError(FloatingPointError):
    """A refinement iterate went non-finite; .trace holds the partial record."""

    def __init__(self, message: str, trace: "RefineTrace"):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class RefineConfig:
    eta: float = 5e-2
    threshold: float = 1e-3
    max_iters: int = 50
    sign: str = "descent"
    eps_mode: str = "resample_each_iter"
    convergence_rule: str = "loss_delta"

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if self.sign not in SIGNS:
            raise ValueError(f"sign must be one of {SIGNS}")
        if self.eps_mode not in EPS_MODES:
            raise ValueError(f"eps_mode must be one of {EPS_MODES}")
        if self.convergence_rule not in CONVERGENCE_RULES:
            raise ValueError(f"convergence_rule must be one of {CONVERGENCE_RULES}")

    def to_config(self) -> dict:
        return {
            "eta": self.eta,
            "threshold": self.threshold,
            "max_iters": self.max_iters,
            "sign": self.sign,
            "eps_mode": self.eps_mode,
            "convergence_rule": self.convergence_rule,
        }


@dataclass
class RefineTrace:
    """Observability record of one refinement run.

    losses[k] is the objective after the (k+1)-th update; initial_loss is
    the objective before any update (None when the loop never ran).
    """

    losses: list[float] = field(default_factory=list)
    terminated_by: str = "max_iters"
    initial_loss: float | None = None

    @property
    def iterations(self) -> int:
        return len(self.losses)


def refine_objective(eps_cfg: np.ndarray, eps_ref: np.ndarray) -> float:
    """Squared Euclidean distance between prediction and reference."""
    eps_cfg = np.asarray(eps_cfg, dtype=np.float64)
    eps_ref = np.asarray(eps_ref, dtype=np.float64)
    if eps_cfg.shape != eps_ref.shape:
        raise ValueError(f"shape mismatch {eps_cfg.shape} vs {eps_ref.shape}")
    d = eps_cfg - eps_ref
    return float(np.sum(d * d))


def converged(trace: RefineTrace, cfg: RefineConfig) -> bool:
    """Convergence test on a nonempty trace, per the configured rule.

    loss_delta compares the last two recorded losses (a single entry has
    no delta yet); grad_norm uses ||grad|| = 2 sqrt(L) of the latest loss,
    which is the gradient norm the next iteration would see.
    """
    if trace.iterations == 0:
        raise ValueError("converged() needs a nonempty trace")
    if cfg.convergence_rule == "loss_delta":
        if trace.iterations < 2:
            return False
        return abs(trace.losses[-1] - trace.losses[-2]) < cfg.threshold
    return 2.0 * np.sqrt(trace.losses[-1]) < cfg.threshold


def refine_loop(
    eps_cfg: np.ndarray, cfg: RefineConfig, rng: np.random.Generator
) -> tuple[np.ndarray, RefineTrace]:
    """Iterate the prediction under the refinement objective.

    Per iteration: draw the reference (once up front for fixed_draw),
    take one gradient step of size eta (signed per config), record the
    post-update objective, and stop on the convergence rule or at
    max_iters. An exactly zero gradient terminates immediately; there is
    nowhere to move. Returns (refined prediction, trace).
    """
    eps = np.array(eps_cfg, dtype=np.float64)
    if not np.all(np.isfinite(eps)):
        raise ValueError("refine_loop input must be finite")
    trace = RefineTrace()
    if cfg.max_iters == 0:
        return eps, trace

    step = -cfg.eta if cfg.sign == "descent" else cfg.eta
    ref = rng.standard_normal(eps.shape) if cfg.eps_mode == "fixed_draw" else None
    for _ in range(cfg.max_iters):
        if cfg.eps_mode == "resample_each_iter":
            ref = rng.standard_normal(eps.shape)
        grad = 2.0 * (eps - ref)
        if trace.initial_loss is None:
            trace.initial_loss = refine_objective(eps, ref)
        if not np.all(np.isfinite(grad)):
            trace.terminated_by = "non_finite"
            raise RefineDivergedError(
                f"non-finite refinement gradient after {trace.iterations} iterations",
                trace,
            )
        if float(np.max(np.abs(grad))) == 0.0:
            trace.losses.append(refine_objective(eps, ref))
            trace.terminated_by = "converged"
            return eps, trace
        eps = eps + step * grad
        trace.losses.append(refine_objective(eps, ref))
        if converged(trace, cfg):
            trace.terminated_by = "converged"
            return eps, trace
    trace.terminated_by = "max_iters"
    return eps, trace
