"""Forward-process noise schedules and their derived coefficient tables.

Step indices are 1-based: t runs over {1, ..., T}, index 0 is the data.
The cumulative tables use the convention alpha_bar(0) = 1, beta_bar(0) = 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable coefficient tables of a discrete forward diffusion.

    Arrays have length T and are indexed 0..T-1 internally; use the
    accessor methods with 1-based t for anything user-facing.
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)
    beta_bar: np.ndarray = field(repr=False)
    kind: str = "linear"
    beta_start: float = 0.0
    beta_end: float = 0.0

    def _check_t(self, t: int, lo: int = 1) -> None:
        if not lo <= t <= self.T:
            raise ValueError(f"step index t={t} outside [{lo}, {self.T}]")

    def beta_at(self, t: int) -> float:
        self._check_t(t)
        return float(self.beta[t - 1])

    def alpha_at(self, t: int) -> float:
        self._check_t(t)
        return float(self.alpha[t - 1])

    def alpha_bar_at(self, t: int) -> float:
        self._check_t(t, lo=0)
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def beta_bar_at(self, t: int) -> float:
        self._check_t(t, lo=0)
        return 0.0 if t == 0 else float(self.beta_bar[t - 1])

    def to_config(self) -> dict:
        return {
            "kind": self.kind,
            "T": self.T,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
        }

    @staticmethod
    def from_config(cfg: dict) -> "NoiseSchedule":
        if cfg.get("kind", "linear") != "linear":
            raise ValueError(f"unsupported schedule kind {cfg.get('kind')!r}")
        return linear_schedule(int(cfg["T"]), float(cfg["beta_start"]), float(cfg["beta_end"]))


def linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear-in-beta schedule on [beta_start, beta_end] with T steps.

    Coefficients are precomputed in double precision; the cumulative
    product underflows in single precision for T around 1000.
    """
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    beta = beta_start + np.arange(T, dtype=np.float64) * (beta_end - beta_start) / (T - 1)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    beta_bar = 1.0 - alpha_bar
    return NoiseSchedule(
        T=T,
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        beta_bar=beta_bar,
        kind="linear",
        beta_start=float(beta_start),
        beta_end=float(beta_end),
    )


def forward_step(s: NoiseSchedule, x_prev: np.ndarray, t: int, rng: np.random.Generator) -> np.ndarray:
    """One forward noising step: sqrt(alpha_t) * x_prev + sqrt(beta_t) * z."""
    s._check_t(t)
    x_prev = np.asarray(x_prev, dtype=np.float64)
    z = rng.standard_normal(x_prev.shape)
    return np.sqrt(s.alpha_at(t)) * x_prev + np.sqrt(s.beta_at(t)) * z


def forward_marginal(s: NoiseSchedule, x0: np.ndarray, t: int, eps: np.ndarray) -> np.ndarray:
    """Closed-form t-step marginal: sqrt(alpha_bar_t) * x0 + sqrt(beta_bar_t) * eps."""
    s._check_t(t)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    return np.sqrt(s.alpha_bar_at(t)) * x0 + np.sqrt(s.beta_bar_at(t)) * eps
