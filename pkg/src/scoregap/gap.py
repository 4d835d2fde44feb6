"""Quantify the gap between deployed and true scores, and sample quality.

The central quantity is the squared score error at the states a chain
actually visited; its sum over steps is the accumulated gap of the run.
Gaps are evaluated along realized trajectories rather than under the true
marginal, because a biased field also biases the path it produces.

mean_deviation ties the score-level gap to the mean-level deviation of
the reverse kernel: the two differ by the square of an analytic per-step
coefficient, exposed by mean_deviation_coefficient so tests can verify
the reduction instead of trusting it.

Also here: desk-scale two-sample metrics (sliced Wasserstein, RBF MMD,
k-NN precision/recall).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fields import ScoreField, score_from_eps
from .guidance import DEGENERACY_FLOOR, ProbeEval, l_from_eval, omega_star_from_eval
from .mixture import ConditionLabel
from .sampler import Trajectory, mu_tilde, predict_x0
from .schedule import NoiseSchedule


def pointwise_gap(
    oracle: ScoreField, guided_score: np.ndarray, x: np.ndarray, t: int, c: ConditionLabel
) -> float:
    """||guided_score - oracle score at (x, t, c)||^2."""
    if oracle is None:
        raise ValueError("pointwise_gap needs an oracle field")
    diff = np.asarray(guided_score, dtype=np.float64) - oracle.score_at(x, t, c)
    return float(np.sum(diff * diff))


def mean_deviation_coefficient(s: NoiseSchedule, t: int) -> float:
    """The affine factor relating score error to reverse-mean error at step t."""
    ab_t, bb_t = s.alpha_bar_at(t), s.beta_bar_at(t)
    ab_p, bb_p = s.alpha_bar_at(t - 1), s.beta_bar_at(t - 1)
    return float((np.sqrt(ab_p) - np.sqrt(bb_p * ab_t / bb_t)) * bb_t / np.sqrt(ab_t))


def mean_deviation(
    s: NoiseSchedule, t: int, x_t: np.ndarray, guided_score: np.ndarray, oracle_score: np.ndarray
) -> float:
    """Squared distance between the reverse means computed from each score.

    Both means substitute their score into the x0 reconstruction
    (x_t + beta_bar_t * score) / sqrt(alpha_bar_t) and evaluate the
    posterior mean; equals mean_deviation_coefficient(t)^2 times the
    squared score difference.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    bb, ab = s.beta_bar_at(t), s.alpha_bar_at(t)
    x0_oracle = (x_t + bb * np.asarray(oracle_score, dtype=np.float64)) / np.sqrt(ab)
    x0_guided = (x_t + bb * np.asarray(guided_score, dtype=np.float64)) / np.sqrt(ab)
    diff = mu_tilde(s, t, x_t, x0_oracle) - mu_tilde(s, t, x_t, x0_guided)
    return float(np.sum(diff * diff))


@dataclass(frozen=True)
class GapStep:
    """One step's gap terms; l values are per-probe means over n_probes states."""

    t: int
    gap: float
    l_at_1: float | None = None
    l_at_omega: float | None = None
    omega_star: float | None = None
    n_probes: int = 1


@dataclass
class GapReport:
    steps: list[GapStep] = field(default_factory=list)
    accumulated_gap: float = 0.0
    n_chains: int = 1
    seeds: list[int] = field(default_factory=list)


def accumulated_gap(traj: Trajectory, oracle: ScoreField) -> GapReport:
    """Per-step squared score gaps at the realized states, summed.

    The gap at step t uses the noise prediction the chain actually
    consumed (post-guidance, post-refinement), converted back to a score.
    When the trajectory records raw conditional/unconditional field
    evaluations, each entry also carries the deviation at weight 1 and at
    the weight used, plus the single-probe optimal weight where defined.
    """
    if oracle is None:
        raise ValueError("accumulated_gap needs an oracle field")
    if not traj.records:
        raise ValueError("trajectory has no step records")
    s = traj.schedule
    steps: list[GapStep] = []
    total = 0.0
    for i, rec in enumerate(traj.records):
        if rec.eps_used is None:
            raise ValueError(f"step record {i} (t={rec.t}) is missing eps_used")
        x_t = traj.states[i]
        used_score = score_from_eps(rec.eps_used, s, rec.t)
        g = pointwise_gap(oracle, used_score, x_t, rec.t, traj.condition)
        l1 = lw = w_star = None
        if rec.s_cond is not None and rec.s_null is not None:
            ev = ProbeEval(
                s_cond=np.atleast_2d(rec.s_cond),
                s_null=np.atleast_2d(rec.s_null),
                oracle_cond=np.atleast_2d(oracle.score_at(x_t, rec.t, traj.condition)),
            )
            omega_used = rec.omega_used if rec.omega_used is not None else 1.0
            l1 = l_from_eval(ev, 1.0)
            lw = l_from_eval(ev, omega_used)
            dd = float(np.sum(ev.delta * ev.delta))
            if dd >= DEGENERACY_FLOOR:
                w_star = omega_star_from_eval(ev, rec.t).value
        steps.append(GapStep(t=rec.t, gap=g, l_at_1=l1, l_at_omega=lw,
                             omega_star=w_star, n_probes=1))
        total += g
    return GapReport(steps=steps, accumulated_gap=total, n_chains=1, seeds=[traj.seed])


def aggregate_reports(reports: list[GapReport]) -> GapReport:
    """Average per-step entries across same-shaped chains; sum the averages."""
    if not reports:
        raise ValueError("no reports to aggregate")
    t_lists = [[st.t for st in r.steps] for r in reports]
    if any(ts != t_lists[0] for ts in t_lists):
        raise ValueError("reports cover different timestep sequences")

    def mean_opt(vals):
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    steps = []
    for i, t in enumerate(t_lists[0]):
        rows = [r.steps[i] for r in reports]
        steps.append(GapStep(
            t=t,
            gap=float(np.mean([st.gap for st in rows])),
            l_at_1=mean_opt([st.l_at_1 for st in rows]),
            l_at_omega=mean_opt([st.l_at_omega for st in rows]),
            omega_star=mean_opt([st.omega_star for st in rows]),
            n_probes=sum(st.n_probes for st in rows),
        ))
    return GapReport(
        steps=steps,
        accumulated_gap=float(sum(st.gap for st in steps)),
        n_chains=sum(r.n_chains for r in reports),
        seeds=sorted({sd for r in reports for sd in r.seeds}),
    )


def omega_star_by_t(
    trajs: list[Trajectory], field: ScoreField, oracle: ScoreField, c: ConditionLabel,
    estimator: str = "least_squares",
) -> dict:
    """Per-step optimal weights estimated from the chains' realized states.

    All trajectories must share a timestep sequence; the probe set at each
    t is the set of visited states there. Steps where the conditional and
    unconditional scores are degenerate everywhere are skipped.
    """
    from .guidance import DegenerateGuidanceError, evaluate_probes

    if not trajs:
        raise ValueError("no trajectories")
    timesteps = trajs[0].timesteps
    if any(tr.timesteps != timesteps for tr in trajs):
        raise ValueError("trajectories cover different timestep sequences")
    out = {}
    for i, t in enumerate(timesteps):
        probes = np.stack([tr.states[i] for tr in trajs])
        ev = evaluate_probes(probes, field, oracle, c, t)
        try:
            out[t] = omega_star_from_eval(ev, t, estimator=estimator)
        except DegenerateGuidanceError:
            continue
    return out


# --- two-sample metrics --------------------------------------------------


def _as_samples(a: np.ndarray, name: str) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    if a.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    return a


def _w1_sorted(a: np.ndarray, b: np.ndarray) -> float:
    """1-d Wasserstein-1 between empirical distributions."""
    if a.shape[0] == b.shape[0]:
        return float(np.mean(np.abs(np.sort(a) - np.sort(b))))
    qs = (np.arange(max(a.shape[0], b.shape[0])) + 0.5) / max(a.shape[0], b.shape[0])
    return float(np.mean(np.abs(np.quantile(a, qs) - np.quantile(b, qs))))


def sliced_wasserstein(
    A: np.ndarray, B: np.ndarray, n_projections: int = 64, rng: np.random.Generator | None = None
) -> float:
    """Mean 1-d W1 distance over random unit projections."""
    A = _as_samples(A, "A")
    B = _as_samples(B, "B")
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    if n_projections < 1:
        raise ValueError("n_projections must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    dirs = rng.standard_normal((n_projections, A.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return float(np.mean([_w1_sorted(A @ u, B @ u) for u in dirs]))


def mmd_rbf(A: np.ndarray, B: np.ndarray, bandwidth: float = 1.0) -> float:
    """Biased (V-statistic) squared MMD with an RBF kernel; 0 iff A == B."""
    A = _as_samples(A, "A")
    B = _as_samples(B, "B")
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")

    def k(x, y):
        d2 = np.sum((x[:, None, :] - y[None, :, :]) ** 2, axis=-1)
        return np.exp(-d2 / (2.0 * bandwidth**2))

    return float(k(A, A).mean() + k(B, B).mean() - 2.0 * k(A, B).mean())


def knn_precision_recall(A: np.ndarray, B: np.ndarray, k: int = 3) -> tuple[float, float]:
    """Manifold precision/recall of generated A against reference B.

    A point lies on the other set's manifold if it falls inside any of
    that set's k-th-nearest-neighbor balls. Swapping the arguments swaps
    the two numbers.
    """
    A = _as_samples(A, "A")
    B = _as_samples(B, "B")
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    if k < 1 or k >= min(A.shape[0], B.shape[0]):
        raise ValueError(f"need 1 <= k < min(|A|, |B|) = {min(A.shape[0], B.shape[0])}, got {k}")

    def self_radii(x):
        d = np.sqrt(np.maximum(np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=-1), 0.0))
        return np.sort(d, axis=1)[:, k]  # column 0 is the zero self-distance

    def cross(x, y):
        return np.sqrt(np.maximum(np.sum((x[:, None, :] - y[None, :, :]) ** 2, axis=-1), 0.0))

    d_ab = cross(A, B)
    precision = float(np.mean(np.any(d_ab <= self_radii(B)[None, :], axis=1)))
    recall = float(np.mean(np.any(d_ab.T <= self_radii(A)[None, :], axis=1)))
    return precision, recall
