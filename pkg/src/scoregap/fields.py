"""Score estimators behind one interface, plus the eps <-> score conversion.

Three realizations of ScoreField:

* OracleScoreField      -- exact diffused-mixture scores (ground truth)
* PerturbedScoreField   -- oracle (or any base) plus a controllable,
                           seed-reproducible error injection
* MlpScoreField         -- a small tanh network trained with manual
                           backprop in noise-prediction form

Score fields are immutable once built and vectorized over leading axes:
``score_at`` accepts x of shape (d,) or (..., d).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .mixture import ConditionLabel, ConditionedMixtureFamily, diffused, score
from .schedule import NoiseSchedule, forward_marginal


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN/inf loss; carries the offending step."""


def score_from_eps(eps: np.ndarray, s: NoiseSchedule, t: int) -> np.ndarray:
    """score = -eps / sqrt(beta_bar_t); exact inverse of eps_from_score."""
    bb = s.beta_bar_at(t)
    if bb <= 0.0:
        raise ValueError(f"beta_bar({t}) = 0; conversion undefined at t=0")
    return -np.asarray(eps, dtype=np.float64) / np.sqrt(bb)


def eps_from_score(score_vec: np.ndarray, s: NoiseSchedule, t: int) -> np.ndarray:
    """eps = -score * sqrt(beta_bar_t)."""
    bb = s.beta_bar_at(t)
    if bb <= 0.0:
        raise ValueError(f"beta_bar({t}) = 0; conversion undefined at t=0")
    return -np.asarray(score_vec, dtype=np.float64) * np.sqrt(bb)


class ScoreField:
    """Uniform interface over score estimators.

    score_at(x, t, c) returns a vector of the same shape as x; c=None asks
    for the unconditional score (only if has_null_condition).
    """

    has_null_condition: bool = False
    dim: int = 0

    def score_at(self, x: np.ndarray, t: int, c: ConditionLabel) -> np.ndarray:
        raise NotImplementedError


class OracleScoreField(ScoreField):
    """Exact scores of the diffused family mixtures; supports the null condition."""

    has_null_condition = True

    def __init__(self, family: ConditionedMixtureFamily, schedule: NoiseSchedule):
        self.family = family
        self.schedule = schedule
        self.dim = family.dim
        # diffused mixtures are cheap to build but hot in chains; memoize per (t, c)
        self._cache: dict[tuple[int, ConditionLabel], object] = {}

    def _diffused(self, t: int, c: ConditionLabel):
        key = (t, c)
        if key not in self._cache:
            self._cache[key] = diffused(self.family.mixture_for(c), self.schedule, t)
        return self._cache[key]

    def score_at(self, x, t, c):
        return score(self._diffused(t, c), x)


def oracle_field(family: ConditionedMixtureFamily, schedule: NoiseSchedule) -> OracleScoreField:
    return OracleScoreField(family, schedule)


@dataclass(frozen=True)
class PerturbationSpec:
    """Controllable score error e(x, t, c).

    kind:
      constant_vector       -- per-(t, c) unit direction times scale; same for all x
      scaled_gaussian_field  -- scale times a deterministic pseudo-random N(0, I)
                                draw keyed by (x, t, c, seed)
      scaled_score_direction -- scale times the base field's own score
    scale = 0 reproduces the base field exactly, whatever the seed.
    """

    kind: str = "constant_vector"
    scale: float = 0.0
    seed: int = 0

    _KINDS = ("constant_vector", "scaled_gaussian_field", "scaled_score_direction")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise ValueError(f"unknown perturbation kind {self.kind!r}; known: {self._KINDS}")
        if self.scale < 0:
            raise ValueError("perturbation scale must be >= 0")


def _digest_rng(*parts: bytes) -> np.random.Generator:
    h = hashlib.blake2b(b"|".join(parts), digest_size=8).digest()
    return np.random.default_rng(int.from_bytes(h, "little"))


def _cond_bytes(c: ConditionLabel) -> bytes:
    return b"null" if c is None else str(int(c)).encode()


class PerturbedScoreField(ScoreField):
    """base field plus the injected error of a PerturbationSpec."""

    def __init__(self, base: ScoreField, spec: PerturbationSpec):
        self.base = base
        self.spec = spec
        self.dim = base.dim
        self.has_null_condition = base.has_null_condition
        self._const_cache: dict[tuple[int, ConditionLabel], np.ndarray] = {}

    def _constant_direction(self, t: int, c: ConditionLabel) -> np.ndarray:
        key = (t, c)
        if key not in self._const_cache:
            rng = _digest_rng(b"const", str(self.spec.seed).encode(), str(t).encode(), _cond_bytes(c))
            v = rng.standard_normal(self.dim)
            self._const_cache[key] = v / np.linalg.norm(v)
        return self._const_cache[key]

    def _error(self, x: np.ndarray, t: int, c: ConditionLabel, base_val: np.ndarray) -> np.ndarray:
        spec = self.spec
        if spec.kind == "constant_vector":
            return spec.scale * self._constant_direction(t, c)
        if spec.kind == "scaled_score_direction":
            return spec.scale * base_val
        # scaled_gaussian_field: one deterministic draw per probe point
        flat = x.reshape(-1, self.dim)
        out = np.empty_like(flat)
        seed_b, t_b, c_b = str(spec.seed).encode(), str(t).encode(), _cond_bytes(c)
        for i, row in enumerate(flat):
            rng = _digest_rng(b"gauss", seed_b, t_b, c_b, row.tobytes())
            out[i] = rng.standard_normal(self.dim)
        return spec.scale * out.reshape(x.shape)

    def score_at(self, x, t, c):
        x = np.asarray(x, dtype=np.float64)
        base_val = self.base.score_at(x, t, c)
        if self.spec.scale == 0.0:
            return base_val
        return base_val + self._error(x, t, c, base_val)


def perturbed_field(base: ScoreField, p: PerturbationSpec) -> PerturbedScoreField:
    return PerturbedScoreField(base, p)


# --- learned field ------------------------------------------------------


def _time_embedding(t, n_freq: int) -> np.ndarray:
    """Sinusoidal features of the raw step index, (..., 2 * n_freq)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    k = np.arange(n_freq, dtype=np.float64)
    freqs = np.exp(-np.log(10000.0) * k / max(n_freq - 1, 1))
    ang = t[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


@dataclass
class MlpScoreModel:
    """Tanh MLP predicting the forward noise from (x, t, c).

    Input encoding: x, sinusoidal embedding of t (n_freq frequencies),
    one-hot condition with an explicit null slot (index n_classes).
    weights[i] maps activations of layer i to layer i+1; velocities hold
    the SGD momentum state and are not persisted in checkpoints.
    """

    d: int
    n_classes: int
    hidden: tuple[int, ...]
    n_freq: int
    seed: int
    p_uncond: float
    weights: list[np.ndarray] = field(repr=False, default_factory=list)
    biases: list[np.ndarray] = field(repr=False, default_factory=list)
    velocities: list[np.ndarray] | None = field(repr=False, default=None)
    activation: str = "tanh"

    @property
    def input_dim(self) -> int:
        return self.d + 2 * self.n_freq + self.n_classes + 1

    @property
    def widths(self) -> list[int]:
        return [self.input_dim, *self.hidden, self.d]

    def encode(self, x: np.ndarray, t, c) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n = x.shape[0]
        emb = np.broadcast_to(_time_embedding(t, self.n_freq), (n, 2 * self.n_freq))
        onehot = np.zeros((n, self.n_classes + 1))
        idx = np.full(n, self.n_classes) if c is None else np.broadcast_to(np.asarray(c), (n,))
        onehot[np.arange(n), idx] = 1.0
        return np.concatenate([x, emb, onehot], axis=1)


def init_mlp(
    d: int,
    n_classes: int,
    hidden: tuple[int, ...] = (64, 64),
    n_freq: int = 16,
    seed: int = 0,
    p_uncond: float = 0.1,
    zero_final: bool = True,
) -> MlpScoreModel:
    """Fresh model with 1/sqrt(fan_in) init.

    The output layer starts at zero by default so the initial prediction
    is 0 and the initial training loss sits at E||eps||^2 = d.
    """
    m = MlpScoreModel(d=d, n_classes=n_classes, hidden=tuple(hidden),
                      n_freq=n_freq, seed=seed, p_uncond=p_uncond)
    rng = np.random.default_rng(seed)
    widths = m.widths
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        m.weights.append(rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in))
        m.biases.append(np.zeros(fan_out))
    if zero_final:
        m.weights[-1][:] = 0.0
    return m


def mlp_forward(m: MlpScoreModel, x: np.ndarray, t, c) -> tuple[np.ndarray, list[np.ndarray]]:
    """Noise prediction plus cached layer activations for backprop.

    x may be (d,) or (n, d); the prediction matches that shape. The cache
    holds the input encoding and every post-activation, with the final
    (linear) output last.
    """
    single = np.asarray(x).ndim == 1
    a = m.encode(x, t, c)
    cache = [a]
    last = len(m.weights) - 1
    for i, (W, b) in enumerate(zip(m.weights, m.biases)):
        z = a @ W + b
        a = z if i == last else np.tanh(z)
        cache.append(a)
    return (a[0] if single else a), cache


def mlp_loss_and_grads(
    m: MlpScoreModel, x: np.ndarray, t, c, target: np.ndarray
) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Mean squared noise-prediction error and its parameter gradients.

    Backprop is hand-derived for the tanh stack; returns
    (loss, dWeights, dBiases) with loss = mean_i ||pred_i - target_i||^2.
    """
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    pred, cache = mlp_forward(m, x, t, c)
    pred = np.atleast_2d(pred)
    n = pred.shape[0]
    resid = pred - target
    loss = float(np.sum(resid * resid) / n)

    dW = [np.empty(0)] * len(m.weights)
    db = [np.empty(0)] * len(m.biases)
    delta = 2.0 * resid / n                       # d loss / d output
    for i in range(len(m.weights) - 1, -1, -1):
        a_prev = cache[i]
        dW[i] = a_prev.T @ delta
        db[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ m.weights[i].T) * (1.0 - cache[i] ** 2)
    return loss, dW, db


def mlp_train_step(
    m: MlpScoreModel,
    batch_x0: np.ndarray,
    batch_c: np.ndarray,
    s: NoiseSchedule,
    rng: np.random.Generator,
    lr: float,
    momentum: float = 0.9,
) -> float:
    """One SGD-with-momentum step of noise-prediction training.

    Draws t uniform in {1..T} and eps ~ N(0, I) per sample, diffuses the
    batch, and regresses the prediction onto eps. Each sample's condition
    is dropped to null with probability m.p_uncond. Mutates the model;
    callers must serialize writers.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    batch_x0 = np.atleast_2d(np.asarray(batch_x0, dtype=np.float64))
    n = batch_x0.shape[0]
    if n == 0:
        raise ValueError("empty training batch")

    t = int(rng.integers(1, s.T + 1))
    eps = rng.standard_normal(batch_x0.shape)
    x_t = forward_marginal(s, batch_x0, t, eps)
    c_idx = np.asarray(batch_c, dtype=np.int64).copy()
    drop = rng.random(n) < m.p_uncond
    c_idx[drop] = m.n_classes                     # null slot

    loss, dW, db = mlp_loss_and_grads(m, x_t, t, c_idx, eps)
    if not np.isfinite(loss):
        raise NonFiniteLossError(f"non-finite training loss {loss!r} at t={t}")

    if m.velocities is None:
        m.velocities = [np.zeros_like(W) for W in m.weights] + [np.zeros_like(b) for b in m.biases]
    k = len(m.weights)
    for i in range(k):
        m.velocities[i] = momentum * m.velocities[i] + dW[i]
        m.weights[i] -= lr * m.velocities[i]
        m.velocities[k + i] = momentum * m.velocities[k + i] + db[i]
        m.biases[i] -= lr * m.velocities[k + i]
    return loss


def train_mlp(
    family: ConditionedMixtureFamily,
    s: NoiseSchedule,
    steps: int = 2000,
    batch: int = 128,
    lr: float = 1e-2,
    hidden: tuple[int, ...] = (64, 64),
    n_freq: int = 16,
    seed: int = 0,
    p_uncond: float = 0.1,
) -> tuple[MlpScoreModel, list[float]]:
    """Train a fresh model on family draws; returns (model, per-step losses)."""
    from .mixture import sample as sample_mixture

    m = init_mlp(family.dim, family.n_classes, hidden=hidden, n_freq=n_freq,
                 seed=seed, p_uncond=p_uncond)
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    losses = []
    for _ in range(steps):
        c = rng.choice(family.n_classes, size=batch, p=family.class_priors)
        x0 = np.empty((batch, family.dim))
        for k in range(family.n_classes):
            mask = c == k
            if np.any(mask):
                x0[mask] = sample_mixture(family.per_class[k], rng, int(mask.sum()))
        losses.append(mlp_train_step(m, x0, c, s, rng, lr))
    return m, losses


class MlpScoreField(ScoreField):
    """Evaluation wrapper turning a trained model into a ScoreField."""

    has_null_condition = True

    def __init__(self, model: MlpScoreModel, schedule: NoiseSchedule):
        self.model = model
        self.schedule = schedule
        self.dim = model.d

    def score_at(self, x, t, c):
        x = np.asarray(x, dtype=np.float64)
        lead = x.shape[:-1]
        eps_pred, _ = mlp_forward(self.model, x.reshape(-1, self.dim), t, c)
        return score_from_eps(eps_pred.reshape(*lead, self.dim), self.schedule, t)
