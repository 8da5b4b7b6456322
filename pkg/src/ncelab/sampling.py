"""Noise distributions, negative sampling, and synthetic problem generation.

All randomness flows through counter-based Philox generators keyed by
(master seed, stream id, substream...): independent reproducible streams
with no shared state, so repeated calls are bit-identical and sampling
could run concurrently across examples without coordination.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import ValidationError
from .model import (
    ConditionalProblem,
    InputSpace,
    LabelSpace,
    LinearFeatures,
    LinearSoftmax,
    cond_prob_table,
    problem_from_scores,
)


def derive_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent Philox stream for (seed, key...)."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class NoiseDistribution:
    """Distribution over labels used for negative sampling.

    Strictly positive everywhere; sampling is inverse-CDF against the
    cumulative table.
    """

    probs: np.ndarray
    log_probs: np.ndarray = field(init=False)
    cumulative: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        p = np.ascontiguousarray(np.asarray(self.probs, dtype=np.float64))
        if p.ndim != 1 or p.size < 2:
            raise ValidationError(f"noise: expected a vector of >= 2 masses, got shape {p.shape}")
        if np.any(p <= 0.0):
            raise ValidationError("noise: every label must have positive mass")
        total = float(p.sum())
        if abs(total - 1.0) > 1e-12:
            raise ValidationError(f"noise: masses sum to {total!r}, not 1 within 1e-12")
        cum = np.cumsum(p)
        cum[-1] = 1.0
        if np.any(np.diff(cum) <= 0.0):
            raise ValidationError("noise: cumulative table is not strictly increasing")
        p.flags.writeable = False
        cum.flags.writeable = False
        lp = np.log(p)
        lp.flags.writeable = False
        object.__setattr__(self, "probs", p)
        object.__setattr__(self, "log_probs", lp)
        object.__setattr__(self, "cumulative", cum)

    @property
    def size(self) -> int:
        return self.probs.size

    @classmethod
    def uniform(cls, m_y: int) -> "NoiseDistribution":
        return cls(np.full(m_y, 1.0 / m_y))

    def sample(self, rng: np.random.Generator, shape) -> np.ndarray:
        u = rng.random(shape)
        return np.searchsorted(self.cumulative, u, side="right").astype(np.int64)

    def digest(self) -> str:
        return hashlib.sha256(self.probs.tobytes()).hexdigest()[:16]


def unigram_power(counts, power: float) -> NoiseDistribution:
    """Noise masses proportional to count**power; zero counts get add-one."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1:
        raise ValidationError(f"counts: expected a vector, got shape {counts.shape}")
    if np.any(counts < 0) or np.any(counts != np.floor(counts)):
        raise ValidationError("counts: entries must be nonnegative integers")
    if power < 0:
        raise ValidationError(f"power: must be >= 0, got {power}")
    if not np.any(counts > 0):
        raise ValidationError("counts: all zero, no distribution to build")
    if np.any(counts == 0):
        counts = counts + 1.0
    weights = counts**power
    return NoiseDistribution(weights / weights.sum())


@dataclass(frozen=True)
class SamplingConfig:
    """How many negatives per example and which reproducible stream."""

    k: int
    seed: int
    stream: int = 0

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValidationError(f"K must be >= 1, got {self.k}")
        if self.seed < 0 or self.stream < 0:
            raise ValidationError("seed and stream must be nonnegative")


@dataclass
class Dataset:
    """Positive pairs plus an (n, K) matrix of sampled negative labels."""

    x: np.ndarray
    y: np.ndarray
    negatives: np.ndarray
    provenance: dict

    def __post_init__(self) -> None:
        self.x = np.ascontiguousarray(np.asarray(self.x, dtype=np.int64))
        self.y = np.ascontiguousarray(np.asarray(self.y, dtype=np.int64))
        self.negatives = np.ascontiguousarray(np.asarray(self.negatives, dtype=np.int64))
        n = self.x.size
        if self.y.shape != (n,):
            raise ValidationError(f"dataset: y shape {self.y.shape} != ({n},)")
        if self.negatives.ndim != 2 or self.negatives.shape[0] != n:
            raise ValidationError(
                f"dataset: negatives shape {self.negatives.shape} is not (n={n}, K)"
            )
        for arr in (self.x, self.y, self.negatives):
            arr.flags.writeable = False

    @property
    def n(self) -> int:
        return self.x.size

    @property
    def k(self) -> int:
        return self.negatives.shape[1]

    def check_bounds(self, m_x: int, m_y: int) -> None:
        if self.n:
            if self.x.min() < 0 or self.x.max() >= m_x:
                raise ValidationError("dataset: x index out of range")
            labels = (self.y, self.negatives)
            if min(a.min() for a in labels) < 0 or max(a.max() for a in labels) >= m_y:
                raise ValidationError("dataset: label index out of range")

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.x, self.y, self.negatives):
            h.update(arr.tobytes())
        h.update(json.dumps(self.provenance, sort_keys=True).encode())
        return h.hexdigest()[:16]


def sample_negatives(cfg: SamplingConfig, noise: NoiseDistribution, n: int) -> np.ndarray:
    """(n, K) labels drawn i.i.d. from the noise distribution.

    Fully determined by (seed, stream); repeated calls are bit-identical.
    """
    if n < 1:
        raise ValidationError(f"n must be >= 1, got {n}")
    rng = derive_rng(cfg.seed, cfg.stream, 2)
    return noise.sample(rng, (n, cfg.k))


def generate_dataset(
    problem: ConditionalProblem,
    n: int,
    cfg: SamplingConfig,
    noise: NoiseDistribution,
) -> Dataset:
    """Draw (x, y) pairs from the problem and attach sampled negatives."""
    if noise.size != problem.m_y:
        raise ValidationError(
            f"noise size {noise.size} != label space size {problem.m_y}"
        )
    provenance = {
        "seed": cfg.seed,
        "stream": cfg.stream,
        "k": cfg.k,
        "n": int(n),
        "noise": noise.digest(),
    }
    if n == 0:
        return Dataset(
            x=np.empty(0, dtype=np.int64),
            y=np.empty(0, dtype=np.int64),
            negatives=np.empty((0, cfg.k), dtype=np.int64),
            provenance=provenance,
        )
    rng_x = derive_rng(cfg.seed, cfg.stream, 0)
    rng_y = derive_rng(cfg.seed, cfg.stream, 1)
    cum_x = np.cumsum(problem.p_x)
    cum_x[-1] = 1.0
    x = np.searchsorted(cum_x, rng_x.random(n), side="right").astype(np.int64)
    cum_rows = np.cumsum(problem.p_y_given_x, axis=1)
    cum_rows[:, -1] = 1.0
    u = rng_y.random(n)
    y = (u[:, None] >= cum_rows[x]).sum(axis=1).astype(np.int64)
    negatives = sample_negatives(cfg, noise, n)
    return Dataset(x=x, y=y, negatives=negatives, provenance=provenance)


def counterexample_problem() -> ConditionalProblem:
    """Two-input/two-label instance on which binary NCE is inconsistent.

    Scores are eta_1 for (x1, y1) and eta_2 everywhere else; the true
    parameters are eta* = (log 1, log 3), so Z(x1) = 4, Z(x2) = 6 and the
    true conditional ratio p(y1|x1)/p(y2|x1) is 1/3. The binary-objective
    population maximizer instead pins that ratio at 3/7 for every K, while
    the ranking objective recovers 1/3.
    """
    features = np.zeros((2, 2, 2))
    features[0, 0, 0] = 1.0
    features[0, 1, 1] = 1.0
    features[1, :, 1] = 1.0
    scoring = LinearFeatures(features)
    theta_star = np.array([np.log(1.0), np.log(3.0)])
    return problem_from_scores(scoring, theta_star, p_x=np.array([0.5, 0.5]))


def _gaussian_mixture(rng: np.random.Generator, shape) -> np.ndarray:
    """Equal-weight 3-component mixture, means -2/0/+2 per coordinate, unit var."""
    means = 2.0 * (rng.integers(0, 3, size=shape) - 1)
    return means + rng.standard_normal(shape)


def make_synthetic_problem(
    d: int, m_x: int, m_y: int, seed: int, theta_scale: float = 1.0
) -> ConditionalProblem:
    """Per-label linear model with mixture-of-Gaussians inputs and weights.

    p_X is uniform; p_{Y|X} is the softmax of inputs @ theta_y. The
    resulting problem is generically *not* self-normalized, which is
    exactly what separates the ranking and binary estimators.
    """
    if min(d, m_x) < 1 or m_y < 2:
        raise ValidationError(f"bad synthetic sizes d={d}, m_x={m_x}, m_y={m_y}")
    rng = derive_rng(seed, 0)
    inputs = _gaussian_mixture(rng, (m_x, d))
    weights = theta_scale * _gaussian_mixture(rng, (m_y, d))
    scoring = LinearSoftmax(inputs, m_y)
    theta_star = weights.ravel()
    return ConditionalProblem(
        input_space=InputSpace(m_x, features=inputs),
        label_space=LabelSpace(m_y),
        p_x=np.full(m_x, 1.0 / m_x),
        p_y_given_x=cond_prob_table(scoring, theta_star),
        scoring=scoring,
        theta_star=theta_star,
    )


def random_tabular_problem(
    m_x: int, m_y: int, d: int, seed: int, feature_scale: float = 1.0
) -> ConditionalProblem:
    """Random dense-feature problem whose truth is its own model (realizable)."""
    rng = derive_rng(seed, 1)
    features = feature_scale * rng.standard_normal((m_x, m_y, d))
    theta_star = rng.standard_normal(d) / np.sqrt(d)
    p_x = rng.random(m_x) + 0.2
    return problem_from_scores(LinearFeatures(features), theta_star, p_x / p_x.sum())


def make_self_normalized_problem(
    m_x: int, m_y: int, d: int, seed: int, feature_scale: float = 1.0
) -> ConditionalProblem:
    """Realizable problem whose whole family has a constant partition function.

    Each context's feature rows are a permutation of one shared set of
    label vectors, so Z(x;theta) = sum_j exp(theta . v_j) is the same for
    every x at *every* theta, not just at the truth. The shared vectors
    are recentered so that Z(x;theta*) = 1, i.e. gamma* = 0. The mapping
    stays identifiable as long as the v_j differences span R^d (so m_y
    must exceed d), which holds generically for random draws.
    """
    if m_y <= d:
        raise ValidationError(
            f"need m_y > d for an identifiable construction, got m_y={m_y}, d={d}"
        )
    rng = derive_rng(seed, 2)
    vectors = feature_scale * rng.standard_normal((m_y, d))
    theta_star = rng.standard_normal(d)
    theta_star /= np.linalg.norm(theta_star)
    gamma = float(logsumexp(vectors @ theta_star))
    vectors = vectors - (gamma / float(theta_star @ theta_star)) * theta_star[None, :]
    perms = np.empty((m_x, m_y), dtype=np.int64)
    seen = set()
    for x in range(m_x):
        while True:
            perm = tuple(rng.permutation(m_y))
            if perm not in seen or len(seen) >= _factorial(m_y):
                seen.add(perm)
                break
        perms[x] = perm
    features = vectors[perms]
    p_x = rng.random(m_x) + 0.2
    return problem_from_scores(
        LinearFeatures(features), theta_star, p_x / p_x.sum(), gamma_star=0.0
    )


def _factorial(n: int) -> int:
    out = 1
    for i in range(2, n + 1):
        out *= i
    return out


def save_dataset_jsonl(dataset: Dataset, path: str) -> None:
    """One record per example; the header line carries the provenance."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps({"provenance": dataset.provenance}, sort_keys=True))
        f.write("\n")
        for i in range(dataset.n):
            rec = {
                "x": int(dataset.x[i]),
                "y": int(dataset.y[i]),
                "neg": dataset.negatives[i].tolist(),
            }
            f.write(json.dumps(rec))
            f.write("\n")


def load_dataset_jsonl(path: str) -> Dataset:
    with open(path, encoding="utf-8") as f:
        header = f.readline()
        try:
            provenance = json.loads(header)["provenance"]
        except (json.JSONDecodeError, KeyError) as exc:
            raise ValidationError(f"dataset jsonl: bad header line ({exc})") from exc
        xs, ys, negs = [], [], []
        for lineno, line in enumerate(f, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                xs.append(rec["x"])
                ys.append(rec["y"])
                negs.append(rec["neg"])
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValidationError(f"dataset jsonl: line {lineno}: {exc}") from exc
    k = provenance.get("k", len(negs[0]) if negs else 1)
    negatives = (
        np.asarray(negs, dtype=np.int64) if negs else np.empty((0, k), dtype=np.int64)
    )
    return Dataset(
        x=np.asarray(xs, dtype=np.int64),
        y=np.asarray(ys, dtype=np.int64),
        negatives=negatives,
        provenance=provenance,
    )


def read_counts_file(path: str) -> tuple[list[str], np.ndarray]:
    """Read a plain-text "token count" file, one pair per line."""
    tokens, counts = [], []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValidationError(f"counts file: line {lineno}: expected 'token count'")
            tokens.append(parts[0])
            try:
                counts.append(int(parts[1]))
            except ValueError as exc:
                raise ValidationError(f"counts file: line {lineno}: bad count") from exc
    if not tokens:
        raise ValidationError("counts file: empty")
    return tokens, np.asarray(counts, dtype=np.int64)
