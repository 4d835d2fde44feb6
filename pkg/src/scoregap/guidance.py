"""Guided score composition and optimal-guidance-weight estimation.

Two compositions (each follows its own weight convention, which differ by
one):

* classifier-free: s_null + omega * (s_cond - s_null); omega = 1 is
  exactly the conditional score (bit-exact by special case)
* classifier-based: s_null + (omega + 1) * classifier_gradient

The per-step deviation L(omega) is the Monte Carlo mean over probe points
of ||guided - true conditional score||^2, an exact quadratic in omega for
fixed probes. Its minimizer is estimated three ways: the exact
least-squares argmin (ratio of sums, the default), the literal
mean-of-ratios reading, and brute-force grid search. The mean-of-ratios
estimator contracts the vector ratio with an inner product by default;
the per-dimension reading sits behind an explicit flag with near-zero
denominators masked.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import ScoreField
from .mixture import ConditionLabel

DEGENERACY_FLOOR = 1e-10  # on ||s_cond - s_null||^2, before any division

ESTIMATORS = ("least_squares", "eq9_mean_of_ratios", "grid")


class DegenerateGuidanceError(ValueError):
    """The conditional and unconditional scores coincide at every probe."""


@dataclass(frozen=True)
class GuidanceSpec:
    """mode in {none, cfg, cg}; omega is ignored for mode=none."""

    mode: str = "none"
    omega: float = 1.0

    def __post_init__(self):
        if self.mode not in ("none", "cfg", "cg"):
            raise ValueError(f"unknown guidance mode {self.mode!r}")


@dataclass(frozen=True)
class OmegaEstimate:
    """An estimated optimal guidance weight with its provenance."""

    value: float
    estimator: str
    sample_count: int
    t: int
    grid_resolution: float | None = None


def _pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def cfg_combine(s_cond: np.ndarray, s_null: np.ndarray, omega: float) -> np.ndarray:
    """s_null + omega * (s_cond - s_null); omega=1 returns s_cond bit-exactly."""
    s_cond, s_null = _pair(s_cond, s_null)
    if omega == 1.0:
        # the no-guidance identity must hold to the bit, not to rounding
        return s_cond.copy()
    return s_null + omega * (s_cond - s_null)


def cg_combine(s_null: np.ndarray, classifier_grad: np.ndarray, omega: float) -> np.ndarray:
    """s_null + (omega + 1) * classifier_grad."""
    s_null, classifier_grad = _pair(s_null, classifier_grad)
    return s_null + (omega + 1.0) * classifier_grad


@dataclass(frozen=True)
class ProbeEval:
    """Field and oracle scores evaluated once over a probe batch (n, d)."""

    s_cond: np.ndarray
    s_null: np.ndarray
    oracle_cond: np.ndarray

    @property
    def n(self) -> int:
        return self.s_cond.shape[0]

    @property
    def delta(self) -> np.ndarray:
        return self.s_cond - self.s_null

    @property
    def err(self) -> np.ndarray:
        """e = true conditional score minus the field's conditional score."""
        return self.oracle_cond - self.s_cond


def evaluate_probes(
    probes: np.ndarray, field: ScoreField, oracle: ScoreField, c: ConditionLabel, t: int
) -> ProbeEval:
    """Batch-evaluate the field (conditional and null) and oracle at the probes.

    Probes should be draws from the step-t marginal; that is the caller's
    responsibility and determines what expectation L(omega) estimates.
    """
    probes = np.atleast_2d(np.asarray(probes, dtype=np.float64))
    if probes.shape[0] == 0:
        raise ValueError("empty probe set")
    return ProbeEval(
        s_cond=field.score_at(probes, t, c),
        s_null=field.score_at(probes, t, None),
        oracle_cond=oracle.score_at(probes, t, c),
    )


def l_from_eval(ev: ProbeEval, omega: float) -> float:
    """Mean over probes of ||cfg(omega) - oracle conditional||^2."""
    diff = cfg_combine(ev.s_cond, ev.s_null, omega) - ev.oracle_cond
    return float(np.mean(np.sum(diff * diff, axis=-1)))


def l_of_omega(
    probes: np.ndarray,
    field: ScoreField,
    oracle: ScoreField,
    c: ConditionLabel,
    t: int,
    omega: float,
) -> float:
    """Monte Carlo estimate of the per-step deviation at guidance weight omega."""
    return l_from_eval(evaluate_probes(probes, field, oracle, c, t), omega)


def grid_points(lo: float, hi: float, resolution: float) -> np.ndarray:
    if not (hi > lo and resolution > 0):
        raise ValueError(f"bad grid range ({lo}, {hi}, {resolution})")
    n = int(np.floor((hi - lo) / resolution + 0.5))
    return lo + resolution * np.arange(n + 1)


def l_curve(ev: ProbeEval, omegas: np.ndarray) -> np.ndarray:
    """L evaluated at many weights by direct residual averaging, chunked.

    Matches l_from_eval to rounding (the omega=1 bit-exact special case
    aside). Each weight's residual is built and reduced explicitly; no
    quadratic-coefficient shortcut, so the grid scan stays an independent
    check on the closed-form argmin.
    """
    omegas = np.asarray(omegas, dtype=np.float64)
    n = ev.n
    base = (ev.s_null - ev.oracle_cond).reshape(-1)  # (n*d,)
    delta = ev.delta.reshape(-1)
    out = np.empty(omegas.shape[0])
    chunk = 256
    scratch = np.empty((chunk, base.size))
    for start in range(0, len(omegas), chunk):
        w = omegas[start:start + chunk]
        buf = scratch[: len(w)]
        np.multiply(w[:, None], delta[None, :], out=buf)
        buf += base
        out[start:start + chunk] = np.einsum("ij,ij->i", buf, buf) / n
    return out


def _grid_argmin(ev: ProbeEval, lo: float, hi: float, resolution: float) -> float:
    omegas = grid_points(lo, hi, resolution)
    return float(omegas[int(np.argmin(l_curve(ev, omegas)))])


def omega_star_from_eval(
    ev: ProbeEval,
    t: int,
    estimator: str = "least_squares",
    grid_range: tuple[float, float] = (-2.0, 6.0),
    grid_resolution: float = 1e-3,
    per_dimension: bool = False,
) -> OmegaEstimate:
    """Optimal guidance weight from pre-evaluated probes; see omega_star."""
    if estimator not in ESTIMATORS:
        raise ValueError(f"unknown estimator {estimator!r}; known: {ESTIMATORS}")
    delta = ev.delta
    dd = np.sum(delta * delta, axis=-1)
    if float(np.max(dd)) < DEGENERACY_FLOOR:
        raise DegenerateGuidanceError(
            f"all {ev.n} probes have ||s_cond - s_null||^2 below {DEGENERACY_FLOOR}; "
            "guidance weight is undefined"
        )

    if estimator == "grid":
        value = _grid_argmin(ev, grid_range[0], grid_range[1], grid_resolution)
        return OmegaEstimate(value=value, estimator="grid", sample_count=ev.n, t=t,
                             grid_resolution=float(grid_resolution))

    err = ev.err
    if estimator == "least_squares":
        de = np.sum(delta * err, axis=-1)
        value = 1.0 + float(np.sum(de)) / float(np.sum(dd))
    elif per_dimension:
        mask = delta * delta >= DEGENERACY_FLOOR
        ratios = np.where(mask, delta * err / np.where(mask, delta * delta, 1.0), np.nan)
        value = 1.0 + float(np.nanmean(ratios))
    else:
        keep = dd >= DEGENERACY_FLOOR
        de = np.sum(delta * err, axis=-1)
        value = 1.0 + float(np.mean(de[keep] / dd[keep]))
    return OmegaEstimate(value=value, estimator=estimator, sample_count=ev.n, t=t)


def omega_star(
    probes: np.ndarray,
    field: ScoreField,
    oracle: ScoreField,
    c: ConditionLabel,
    t: int,
    estimator: str = "least_squares",
    grid_range: tuple[float, float] = (-2.0, 6.0),
    grid_resolution: float = 1e-3,
    per_dimension: bool = False,
) -> OmegaEstimate:
    """Estimate the weight minimizing the per-step deviation L(omega).

    least_squares is the exact argmin of the sampled quadratic,
    1 + sum<delta, err> / sum<delta, delta>; eq9_mean_of_ratios averages
    the per-probe ratio instead (they coincide on a single probe); grid
    scans l_of_omega over [grid_range] at grid_resolution. All three are
    exactly 1 when the field's conditional score is error-free.
    """
    ev = evaluate_probes(probes, field, oracle, c, t)
    return omega_star_from_eval(ev, t, estimator=estimator, grid_range=grid_range,
                                grid_resolution=grid_resolution, per_dimension=per_dimension)


class GuidedScoreField(ScoreField):
    """Deployed score under a GuidanceSpec, as a field of its own.

    mode=cg derives the classifier gradient from the base field's
    conditional-minus-unconditional difference, which is the exact Bayes
    gradient whenever the base field is the oracle. An optional per-step
    weight table overrides spec.omega at the steps it lists.
    """

    def __init__(self, base: ScoreField, spec: GuidanceSpec,
                 omega_by_t: dict[int, float] | None = None):
        if spec.mode in ("cfg", "cg") and not base.has_null_condition:
            raise ValueError(f"guidance mode {spec.mode!r} needs a field with null-condition support")
        self.base = base
        self.spec = spec
        self.omega_by_t = omega_by_t
        self.dim = base.dim
        self.has_null_condition = base.has_null_condition

    def omega_at(self, t: int) -> float:
        if self.omega_by_t is not None and t in self.omega_by_t:
            return float(self.omega_by_t[t])
        return self.spec.omega

    def score_at(self, x, t, c):
        if self.spec.mode == "none":
            return self.base.score_at(x, t, c)
        s_cond = self.base.score_at(x, t, c)
        s_null = self.base.score_at(x, t, None)
        if self.spec.mode == "cfg":
            return cfg_combine(s_cond, s_null, self.omega_at(t))
        return cg_combine(s_null, s_cond - s_null, self.omega_at(t))
