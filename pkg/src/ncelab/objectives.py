"""Sampled and population objectives for ranking/binary NCE and MLE.

Conventions:

* All objectives are *maximized* and are <= 0 at feasible points.
* The shifted score is shat(x,y) = s(x,y;theta) - log p_N(y); the binary
  classifier's logit is stilde = shat - gamma - log K, so the positive
  class probability is g = sigmoid(stilde).
* Per-example terms are reduced with numpy's fixed-order (pairwise)
  summation, so results do not depend on thread count.

Posterior bookkeeping for a candidate tuple (x, ybar_0..ybar_K): q is the
model posterior over which slot holds the true label, beta the posterior
under the data distribution, alpha the tuple's unnormalized mass, and the
table stores the *positive* cross-entropy H(beta, q) = -sum beta log q
(minimized, rather than its negation maximized, at the truth).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import expit, log_expit, log_softmax, logsumexp

from .errors import BudgetError, ValidationError
from .model import ConditionalProblem, ScoringFunction, check_params
from .sampling import Dataset, NoiseDistribution, derive_rng

POPULATION_TERM_BUDGET = 10**7


@dataclass(frozen=True)
class BinaryParams:
    """Score parameters plus the scalar normalizer estimate gamma."""

    theta: np.ndarray
    gamma: float

    def __post_init__(self) -> None:
        if not np.isfinite(self.gamma):
            raise ValidationError("gamma must be finite")
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=np.float64))


@dataclass(frozen=True)
class PosteriorTable:
    """Posteriors over the true-label slot for one candidate tuple."""

    q: np.ndarray
    beta: np.ndarray
    alpha: float
    cross_entropy: float


@dataclass(frozen=True)
class RegularizerConfig:
    """Squared-log-partition penalty settings.

    ``m`` noise draws per example estimate Z(x;theta) unbiasedly, since
    E_{p_N}[exp(s - log p_N)] = Z. The stream field keys the draws; the
    full-batch optimizer keeps it fixed so line-search comparisons see a
    deterministic objective, while epoch-based training may advance it.
    """

    alpha: float
    m: int
    seed: int = 0
    stream: int = 0

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ValidationError(f"regularizer alpha must be >= 0, got {self.alpha}")
        if self.m < 1:
            raise ValidationError(f"regularizer m must be >= 1, got {self.m}")


def _require_nonempty(dataset: Dataset) -> None:
    if dataset.n == 0:
        raise ValidationError("dataset is empty")


def _shifted_table(sf: ScoringFunction, theta: np.ndarray, noise: NoiseDistribution) -> np.ndarray:
    if noise.size != sf.m_y:
        raise ValidationError(f"noise size {noise.size} != label count {sf.m_y}")
    return sf.score_table(theta) - noise.log_probs[None, :]


def _candidate_labels(dataset: Dataset) -> np.ndarray:
    """(n, K+1) label matrix with the observed label in slot 0."""
    return np.concatenate([dataset.y[:, None], dataset.negatives], axis=1)


def _table_weights_to_grad(
    sf: ScoringFunction, theta: np.ndarray, rows: np.ndarray, cols: np.ndarray,
    weights: np.ndarray,
) -> np.ndarray:
    """Scatter per-(x,y) weights into an (m_x, m_y) table and backprop."""
    flat = np.bincount(
        rows.ravel() * sf.m_y + cols.ravel(),
        weights=weights.ravel(),
        minlength=sf.m_x * sf.m_y,
    )
    return sf.accumulate_grad(theta, flat.reshape(sf.m_x, sf.m_y))


# --------------------------------------------------------------------------
# sampled objectives


def ranking_objective(
    sf: ScoringFunction, theta: np.ndarray, dataset: Dataset, noise: NoiseDistribution
) -> float:
    """Mean log-probability of ranking the true label above its negatives."""
    _require_nonempty(dataset)
    dataset.check_bounds(sf.m_x, sf.m_y)
    shat = _shifted_table(sf, theta, noise)
    cand = shat[dataset.x[:, None], _candidate_labels(dataset)]
    return float(np.mean(cand[:, 0] - logsumexp(cand, axis=1)))


def ranking_gradient(
    sf: ScoringFunction, theta: np.ndarray, dataset: Dataset, noise: NoiseDistribution
) -> np.ndarray:
    _require_nonempty(dataset)
    dataset.check_bounds(sf.m_x, sf.m_y)
    theta = check_params(theta, sf.n_params)
    shat = _shifted_table(sf, theta, noise)
    labels = _candidate_labels(dataset)
    cand = shat[dataset.x[:, None], labels]
    w = np.exp(log_softmax(cand, axis=1))
    coeff = -w
    coeff[:, 0] += 1.0
    rows = np.broadcast_to(dataset.x[:, None], labels.shape)
    return _table_weights_to_grad(sf, theta, rows, labels, coeff) / dataset.n


def binary_objective(
    sf: ScoringFunction, bp: BinaryParams, dataset: Dataset, noise: NoiseDistribution
) -> float:
    """Mean log-likelihood of classifying true pairs vs K noise pairs."""
    _require_nonempty(dataset)
    dataset.check_bounds(sf.m_x, sf.m_y)
    stilde = _shifted_table(sf, bp.theta, noise) - bp.gamma - np.log(dataset.k)
    pos = log_expit(stilde[dataset.x, dataset.y])
    neg = log_expit(-stilde[dataset.x[:, None], dataset.negatives])
    return float(np.mean(pos + neg.sum(axis=1)))


def binary_gradient(
    sf: ScoringFunction, bp: BinaryParams, dataset: Dataset, noise: NoiseDistribution
) -> np.ndarray:
    """Gradient in (theta, gamma); the last coordinate is d/dgamma."""
    _require_nonempty(dataset)
    dataset.check_bounds(sf.m_x, sf.m_y)
    theta = check_params(bp.theta, sf.n_params)
    stilde = _shifted_table(sf, theta, noise) - bp.gamma - np.log(dataset.k)
    pos_coeff = 1.0 - expit(stilde[dataset.x, dataset.y])
    neg_coeff = -expit(stilde[dataset.x[:, None], dataset.negatives])
    rows = np.concatenate(
        [dataset.x[:, None], np.broadcast_to(dataset.x[:, None], dataset.negatives.shape)],
        axis=1,
    )
    cols = _candidate_labels(dataset)
    coeff = np.concatenate([pos_coeff[:, None], neg_coeff], axis=1)
    theta_grad = _table_weights_to_grad(sf, theta, rows, cols, coeff) / dataset.n
    gamma_grad = -float(coeff.sum()) / dataset.n
    return np.concatenate([theta_grad, [gamma_grad]])


def mle_objective(sf: ScoringFunction, theta: np.ndarray, dataset: Dataset) -> float:
    """Mean log softmax probability of the observed labels (negatives ignored)."""
    _require_nonempty(dataset)
    dataset.check_bounds(sf.m_x, sf.m_y)
    log_p = log_softmax(sf.score_table(theta), axis=1)
    return float(np.mean(log_p[dataset.x, dataset.y]))


def mle_gradient(sf: ScoringFunction, theta: np.ndarray, dataset: Dataset) -> np.ndarray:
    _require_nonempty(dataset)
    dataset.check_bounds(sf.m_x, sf.m_y)
    theta = check_params(theta, sf.n_params)
    counts = np.bincount(
        dataset.x * sf.m_y + dataset.y, minlength=sf.m_x * sf.m_y
    ).reshape(sf.m_x, sf.m_y)
    row_counts = counts.sum(axis=1)
    probs = np.exp(log_softmax(sf.score_table(theta), axis=1))
    weights = counts - row_counts[:, None] * probs
    return sf.accumulate_grad(theta, weights) / dataset.n


# --------------------------------------------------------------------------
# posteriors


def posteriors(
    sf: ScoringFunction,
    theta: np.ndarray,
    problem: ConditionalProblem,
    noise: NoiseDistribution,
    x: int,
    labels,
) -> PosteriorTable:
    """Posterior table for one candidate tuple (x, ybar_0..ybar_K)."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or labels.size < 2:
        raise ValidationError("labels: expected a tuple of >= 2 candidate labels")
    shat = _shifted_table(sf, theta, noise)
    q = np.exp(log_softmax(shat[x, labels]))
    ratios = problem.p_y_given_x[x, labels] / noise.probs[labels]
    beta = ratios / ratios.sum()
    noise_prod = float(np.prod(noise.probs[labels]))
    alpha = float(
        np.sum(problem.p_xy[x, labels] * (noise_prod / noise.probs[labels]))
    )
    cross_entropy = float(-(beta * np.log(q)).sum())
    return PosteriorTable(q=q, beta=beta, alpha=alpha, cross_entropy=cross_entropy)


# --------------------------------------------------------------------------
# population objectives


class PopulationEstimate(NamedTuple):
    value: float
    stderr: float


def _tuple_chunks(m_y: int, width: int, chunk: int = 200_000):
    """Yield (B, width) blocks enumerating all label tuples in Y^width."""
    total = m_y**width
    digits = m_y ** np.arange(width - 1, -1, -1, dtype=np.int64)
    for start in range(0, total, chunk):
        ids = np.arange(start, min(start + chunk, total), dtype=np.int64)
        yield (ids[:, None] // digits[None, :]) % m_y


def _check_population_budget(terms: int, what: str) -> None:
    if terms > POPULATION_TERM_BUDGET:
        raise BudgetError(
            f"exact {what} needs {terms} terms, over the {POPULATION_TERM_BUDGET} budget; "
            "use monte-carlo mode"
        )


def population_ranking_objective(
    sf: ScoringFunction,
    theta: np.ndarray,
    problem: ConditionalProblem,
    noise: NoiseDistribution,
    k: int,
    mode: str = "exact",
    num_samples: int | None = None,
    seed: int = 0,
):
    """Expected ranking objective under the data and noise distributions.

    mode="exact" enumerates all m_x * m_y**(K+1) candidate tuples (within
    the term budget) and returns a float. mode="mc" averages num_samples
    simulated tuples and returns a PopulationEstimate(value, stderr).
    """
    if k < 1:
        raise ValidationError(f"K must be >= 1, got {k}")
    shat = _shifted_table(sf, theta, noise)
    log_pyx = np.log(problem.p_y_given_x)
    if mode == "exact":
        _check_population_budget(problem.m_x * problem.m_y ** (k + 1), "ranking objective")
        log_pn = noise.log_probs
        total = 0.0
        for block in _tuple_chunks(problem.m_y, k + 1):
            log_noise_mass = log_pn[block[:, 1:]].sum(axis=1)
            for x in range(problem.m_x):
                cand = shat[x, block]
                terms = cand[:, 0] - logsumexp(cand, axis=1)
                log_w = np.log(problem.p_x[x]) + log_pyx[x, block[:, 0]] + log_noise_mass
                total += float(np.exp(log_w) @ terms)
        return total
    if mode == "mc":
        if num_samples is None or num_samples < 2:
            raise ValidationError("monte-carlo mode needs num_samples >= 2")
        rng = derive_rng(seed, 3)
        x, labels = _simulate_tuples(problem, noise, k, num_samples, rng)
        cand = shat[x[:, None], labels]
        terms = cand[:, 0] - logsumexp(cand, axis=1)
        value = float(terms.mean())
        stderr = float(terms.std(ddof=1) / np.sqrt(num_samples))
        return PopulationEstimate(value, stderr)
    raise ValidationError(f"unknown mode '{mode}' (expected 'exact' or 'mc')")


def _simulate_tuples(problem, noise, k, size, rng):
    cum_x = np.cumsum(problem.p_x)
    cum_x[-1] = 1.0
    x = np.searchsorted(cum_x, rng.random(size), side="right").astype(np.int64)
    cum_rows = np.cumsum(problem.p_y_given_x, axis=1)
    cum_rows[:, -1] = 1.0
    y0 = (rng.random(size)[:, None] >= cum_rows[x]).sum(axis=1).astype(np.int64)
    negs = noise.sample(rng, (size, k))
    return x, np.concatenate([y0[:, None], negs], axis=1)


def population_ranking_gradient(
    sf: ScoringFunction,
    theta: np.ndarray,
    problem: ConditionalProblem,
    noise: NoiseDistribution,
    k: int,
) -> np.ndarray:
    """Exact gradient of the population ranking objective."""
    if k < 1:
        raise ValidationError(f"K must be >= 1, got {k}")
    _check_population_budget(problem.m_x * problem.m_y ** (k + 1), "ranking gradient")
    theta = check_params(theta, sf.n_params)
    shat = _shifted_table(sf, theta, noise)
    log_pyx = np.log(problem.p_y_given_x)
    log_pn = noise.log_probs
    table = np.zeros((problem.m_x, problem.m_y))
    for block in _tuple_chunks(problem.m_y, k + 1):
        log_noise_mass = log_pn[block[:, 1:]].sum(axis=1)
        for x in range(problem.m_x):
            cand = shat[x, block]
            q = np.exp(log_softmax(cand, axis=1))
            w = np.exp(np.log(problem.p_x[x]) + log_pyx[x, block[:, 0]] + log_noise_mass)
            coeff = -w[:, None] * q
            coeff[:, 0] += w
            table[x] += np.bincount(
                block.ravel(), weights=coeff.ravel(), minlength=problem.m_y
            )
    return sf.accumulate_grad(theta, table)


def population_binary_objective(
    sf: ScoringFunction,
    bp: BinaryParams,
    problem: ConditionalProblem,
    noise: NoiseDistribution,
    k: int,
) -> float:
    """Expected binary objective; exact, needs only a sum over X x Y."""
    if k < 1:
        raise ValidationError(f"K must be >= 1, got {k}")
    stilde = _shifted_table(sf, bp.theta, noise) - bp.gamma - np.log(k)
    pos = problem.p_xy * log_expit(stilde)
    neg = k * problem.p_x[:, None] * noise.probs[None, :] * log_expit(-stilde)
    return float(pos.sum() + neg.sum())


def population_binary_gradient(
    sf: ScoringFunction,
    bp: BinaryParams,
    problem: ConditionalProblem,
    noise: NoiseDistribution,
    k: int,
) -> np.ndarray:
    if k < 1:
        raise ValidationError(f"K must be >= 1, got {k}")
    theta = check_params(bp.theta, sf.n_params)
    stilde = _shifted_table(sf, theta, noise) - bp.gamma - np.log(k)
    sig = expit(stilde)
    weights = problem.p_xy * (1.0 - sig) - k * problem.p_x[:, None] * noise.probs[None, :] * sig
    theta_grad = sf.accumulate_grad(theta, weights)
    return np.concatenate([theta_grad, [-float(weights.sum())]])


# --------------------------------------------------------------------------
# self-normalization regularizer


def regularizer_from_draws(
    sf: ScoringFunction,
    theta: np.ndarray,
    x_idx: np.ndarray,
    draws: np.ndarray,
    noise: NoiseDistribution,
    alpha: float,
) -> tuple[float, np.ndarray]:
    """Penalty (alpha/n) sum_i (log mean_j exp shat(x_i, ytilde_ij))^2.

    The inner mean estimates Z(x_i; theta); the penalty pushes log Z
    toward 0, i.e. a constant (unit) partition function.
    """
    theta = check_params(theta, sf.n_params)
    n = x_idx.size
    if alpha == 0.0 or n == 0:
        return 0.0, np.zeros(sf.n_params)
    m = draws.shape[1]
    shat = _shifted_table(sf, theta, noise)
    vals = shat[x_idx[:, None], draws]
    log_zhat = logsumexp(vals, axis=1) - np.log(m)
    value = float(alpha / n * np.sum(log_zhat**2))
    w = np.exp(log_softmax(vals, axis=1))
    coeff = (2.0 * alpha / n) * log_zhat[:, None] * w
    rows = np.broadcast_to(x_idx[:, None], draws.shape)
    grad = _table_weights_to_grad(sf, theta, rows, draws, coeff)
    return value, grad


def regularizer(
    sf: ScoringFunction,
    theta: np.ndarray,
    dataset: Dataset,
    noise: NoiseDistribution,
    cfg: RegularizerConfig,
) -> tuple[float, np.ndarray]:
    """Sampled squared-log-partition penalty and its analytic gradient."""
    theta = check_params(theta, sf.n_params)
    if cfg.alpha == 0.0:
        return 0.0, np.zeros(sf.n_params)
    _require_nonempty(dataset)
    rng = derive_rng(cfg.seed, cfg.stream, 4)
    draws = noise.sample(rng, (dataset.n, cfg.m))
    return regularizer_from_draws(sf, theta, dataset.x, draws, noise, cfg.alpha)
