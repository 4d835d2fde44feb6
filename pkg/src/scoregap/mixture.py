"""Ground-truth conditioned data distributions: diagonal Gaussian mixtures.

These are the analytic oracles of the lab. Everything here is exact and
closed-form: log-densities, scores, diffused marginals, and the Bayes
classifier over classes. Conditions are plain ints in {0..K-1}; ``None``
is the null condition (unconditional).

All density combinations run in log space (log-sum-exp); component
responsibilities come out of a softmax so there is never a division by a
possibly-underflowed total density.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .schedule import NoiseSchedule

ConditionLabel = int | None

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class GaussianMixture:
    """Mixture of axis-aligned Gaussians: weights (K,), means (K, d), variances (K, d)."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.asarray(self.means, dtype=np.float64)
        var = np.asarray(self.variances, dtype=np.float64)
        if mu.ndim != 2:
            raise ValueError("means must be a (K, d) array")
        if var.shape != mu.shape or w.shape != (mu.shape[0],):
            raise ValueError("weights/means/variances shapes are inconsistent")
        if np.any(w <= 0):
            raise ValueError("all mixture weights must be positive")
        if abs(float(w.sum()) - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {w.sum()!r}, expected 1 within 1e-12")
        if np.any(var <= 0):
            raise ValueError("all variances must be strictly positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]


def _check_dim(m: GaussianMixture, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != m.dim:
        raise ValueError(f"x has dimension {x.shape[-1]}, mixture has {m.dim}")
    return x


def _component_log_densities(m: GaussianMixture, x: np.ndarray) -> np.ndarray:
    """Per-component log(w_k N(x; mu_k, var_k)); x is (..., d), result (..., K)."""
    diff = x[..., None, :] - m.means            # (..., K, d)
    quad = np.sum(diff * diff / m.variances, axis=-1)
    log_norm = 0.5 * np.sum(LOG_2PI + np.log(m.variances), axis=-1)
    return np.log(m.weights) - log_norm - 0.5 * quad


def _logsumexp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    hi = np.max(a, axis=axis, keepdims=True)
    hi = np.where(np.isfinite(hi), hi, 0.0)
    return np.squeeze(hi, axis=axis) + np.log(np.sum(np.exp(a - hi), axis=axis))


def log_density(m: GaussianMixture, x: np.ndarray) -> float | np.ndarray:
    """log q(x) evaluated stably; x is (d,) or a batch (..., d)."""
    x = _check_dim(m, x)
    out = _logsumexp(_component_log_densities(m, x), axis=-1)
    return float(out) if out.ndim == 0 else out


def score(m: GaussianMixture, x: np.ndarray) -> np.ndarray:
    """Exact gradient of log_density: sum_k r_k(x) (mu_k - x) / var_k."""
    x = _check_dim(m, x)
    log_terms = _component_log_densities(m, x)          # (..., K)
    log_terms = log_terms - np.max(log_terms, axis=-1, keepdims=True)
    r = np.exp(log_terms)
    r = r / np.sum(r, axis=-1, keepdims=True)           # responsibilities
    grad_k = (m.means - x[..., None, :]) / m.variances  # (..., K, d)
    return np.sum(r[..., None] * grad_k, axis=-2)


def diffused(m: GaussianMixture, s: NoiseSchedule, t: int) -> GaussianMixture:
    """The t-step forward marginal of the mixture, again a mixture.

    Gaussian convolution acts componentwise: means scale by sqrt(alpha_bar_t)
    and variances become alpha_bar_t * var + beta_bar_t.
    """
    ab = s.alpha_bar_at(t)
    bb = s.beta_bar_at(t)
    return GaussianMixture(
        weights=m.weights.copy(),
        means=np.sqrt(ab) * m.means,
        variances=ab * m.variances + bb,
    )


def sample(m: GaussianMixture, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Draw from the mixture; (d,) for n=None, else (n, d). Deterministic per rng state."""
    size = 1 if n is None else n
    comp = rng.choice(m.n_components, size=size, p=m.weights)
    z = rng.standard_normal((size, m.dim))
    out = m.means[comp] + np.sqrt(m.variances[comp]) * z
    return out[0] if n is None else out


@dataclass(frozen=True)
class ConditionedMixtureFamily:
    """Per-class Gaussian mixtures plus class priors.

    The unconditional distribution is the prior-weighted union of the
    class mixtures, so the Bayes decomposition of the conditional score
    holds exactly at every diffusion step.
    """

    class_priors: np.ndarray
    per_class: tuple[GaussianMixture, ...]

    def __post_init__(self):
        pri = np.asarray(self.class_priors, dtype=np.float64)
        if pri.ndim != 1 or len(self.per_class) != pri.shape[0]:
            raise ValueError("class_priors must be 1-d with one entry per class mixture")
        if np.any(pri <= 0) or abs(float(pri.sum()) - 1.0) > 1e-12:
            raise ValueError("class priors must be positive and sum to 1")
        dims = {m.dim for m in self.per_class}
        if len(dims) != 1:
            raise ValueError(f"class mixtures disagree on dimension: {sorted(dims)}")
        object.__setattr__(self, "class_priors", pri)
        object.__setattr__(self, "per_class", tuple(self.per_class))

    @property
    def n_classes(self) -> int:
        return len(self.per_class)

    @property
    def dim(self) -> int:
        return self.per_class[0].dim

    def mixture_for(self, c: ConditionLabel) -> GaussianMixture:
        """Class mixture for c, or the unconditional mixture for c=None."""
        if c is None:
            return self.unconditional()
        if not 0 <= c < self.n_classes:
            raise ValueError(f"class index {c} outside [0, {self.n_classes})")
        return self.per_class[c]

    def unconditional(self) -> GaussianMixture:
        weights = np.concatenate(
            [p * m.weights for p, m in zip(self.class_priors, self.per_class)]
        )
        means = np.concatenate([m.means for m in self.per_class])
        variances = np.concatenate([m.variances for m in self.per_class])
        return GaussianMixture(weights=weights, means=means, variances=variances)


def classifier(
    f: ConditionedMixtureFamily, s: NoiseSchedule, x: np.ndarray, t: int
) -> tuple[np.ndarray, np.ndarray]:
    """Exact Bayes classifier on the diffused family.

    Returns (probs, grads): probs is q(c | x_t) with shape (..., K); grads is
    the per-class gradient of log q(c | x_t) with shape (..., K, d), equal to
    the diffused class score minus the diffused unconditional score.
    """
    x = np.asarray(x, dtype=np.float64)
    class_logs = np.stack(
        [np.log(p) + log_density(diffused(m, s, t), x)
         for p, m in zip(f.class_priors, f.per_class)],
        axis=-1,
    )
    class_logs = np.atleast_1d(class_logs)
    log_total = _logsumexp(class_logs, axis=-1)
    probs = np.exp(class_logs - log_total[..., None])

    uncond_score = score(diffused(f.unconditional(), s, t), x)
    grads = np.stack(
        [score(diffused(m, s, t), x) - uncond_score for m in f.per_class],
        axis=-2,
    )
    return probs, grads


# --- preset families ---------------------------------------------------
#
# Reproducible fixtures referenced by name in configs. Constants are part
# of the package contract; tests pin behavior against them.

def _bimodal_1d() -> ConditionedMixtureFamily:
    # Two 1-d classes with asymmetric placement and priors. Unit component
    # variances make every diffused marginal's variance exactly 1, so the
    # conditional-minus-unconditional score difference stays bounded by
    # the mode separation at every t and every x; per-step guidance
    # corrections then behave even far off the data manifold.
    left = GaussianMixture(weights=[1.0], means=[[-1.2]], variances=[[1.0]])
    right = GaussianMixture(weights=[1.0], means=[[1.5]], variances=[[1.0]])
    return ConditionedMixtureFamily(class_priors=[0.6, 0.4], per_class=[left, right])


def _ring8_2d() -> ConditionedMixtureFamily:
    # Eight components on a radius-2 circle, split into two half-moon-like
    # classes of four components each.
    angles = 2.0 * np.pi * np.arange(8) / 8.0
    means = 2.0 * np.column_stack([np.cos(angles), np.sin(angles)])
    var = np.full((4, 2), 0.15)
    w = np.full(4, 0.25)
    upper = GaussianMixture(weights=w, means=means[:4], variances=var)
    lower = GaussianMixture(weights=w, means=means[4:], variances=var)
    return ConditionedMixtureFamily(class_priors=[0.5, 0.5], per_class=[upper, lower])


def _single_gauss_1d() -> ConditionedMixtureFamily:
    # standard normal: every diffused marginal is again N(0, 1) and the
    # N(0, I) chain start is exact, so sampler fidelity checks carry no
    # truncation bias from finite T
    only = GaussianMixture(weights=[1.0], means=[[0.0]], variances=[[1.0]])
    return ConditionedMixtureFamily(class_priors=[1.0], per_class=[only])


_PRESETS = {
    "bimodal-1d": _bimodal_1d,
    "ring8-2d": _ring8_2d,
    "single-gauss-1d": _single_gauss_1d,
}


def preset_family(name: str) -> ConditionedMixtureFamily:
    """Built-in families: 'bimodal-1d', 'ring8-2d', 'single-gauss-1d'."""
    try:
        return _PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown preset family {name!r}; known: {sorted(_PRESETS)}") from None


def family_from_dict(d: dict) -> ConditionedMixtureFamily:
    """Build a family from the documented {priors, classes: [...]} structure."""
    try:
        classes = [
            GaussianMixture(weights=c["weights"], means=c["means"], variances=c["variances"])
            for c in d["classes"]
        ]
        return ConditionedMixtureFamily(class_priors=d["priors"], per_class=classes)
    except KeyError as exc:
        raise ValueError(f"family file missing required field {exc}") from None


def family_to_dict(f: ConditionedMixtureFamily) -> dict:
    return {
        "priors": f.class_priors.tolist(),
        "classes": [
            {
                "weights": m.weights.tolist(),
                "means": m.means.tolist(),
                "variances": m.variances.tolist(),
            }
            for m in f.per_class
        ],
    }


def load_family(path) -> ConditionedMixtureFamily:
    """Load a family from a JSON file matching docs/family_schema.json."""
    with open(path, "r", encoding="utf-8") as fh:
        return family_from_dict(json.load(fh))
