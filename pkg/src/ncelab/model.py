"""Conditional models p(y|x) = exp(s(x,y;theta)) / Z(x;theta) over finite spaces.

Scoring functions are closed enumerations (no plug-ins): a dense feature
table, a per-label linear ("softmax regression") form, a per-context bias
wrapper, and a log-bilinear n-gram form. Every variant exposes the same
small surface:

* ``score_table(theta)``     -- all scores as an (m_x, m_y) array,
* ``accumulate_grad(theta, w)`` -- sum_{x,y} w[x,y] * grad s(x,y;theta),

which is enough to evaluate every objective and covariance in the package
without per-pair Python loops. Partition functions and conditionals always
go through the max-shifted log-sum-exp; naive exponentiation overflows for
scores around 700.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, logsumexp

from .errors import NumericError, ValidationError

PROB_TOL = 1e-12
SELF_NORM_TOL = 1e-10


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(np.asarray(a, dtype=np.float64))
    out.flags.writeable = False
    return out


def check_params(theta: np.ndarray, n_params: int) -> np.ndarray:
    """Validate a flat parameter vector: right length, finite entries."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (n_params,):
        raise ValidationError(
            f"theta: expected shape ({n_params},), got {theta.shape}"
        )
    if not np.all(np.isfinite(theta)):
        raise ValidationError("theta: non-finite entries")
    return theta


@dataclass(frozen=True)
class LabelSpace:
    """Finite label set; indices 0..size-1, optional strings for LM use."""

    size: int
    labels: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if self.size < 2:
            raise ValidationError(f"label space: size must be >= 2, got {self.size}")
        if self.labels is not None and len(self.labels) != self.size:
            raise ValidationError(
                f"label space: {len(self.labels)} strings for size {self.size}"
            )


@dataclass(frozen=True)
class InputSpace:
    """Finite input set; optionally carries a feature row per input."""

    size: int
    features: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.size < 1:
            raise ValidationError(f"input space: size must be >= 1, got {self.size}")
        if self.features is not None:
            f = _readonly(self.features)
            if f.ndim != 2 or f.shape[0] != self.size:
                raise ValidationError(
                    f"input space: features must be ({self.size}, d), got {f.shape}"
                )
            object.__setattr__(self, "features", f)


class ScoringFunction:
    """Base class: parametric score s(x, y; theta) with gradient."""

    m_x: int
    m_y: int
    n_params: int

    def score_table(self, theta: np.ndarray) -> np.ndarray:
        """All scores, shape (m_x, m_y)."""
        raise NotImplementedError

    def accumulate_grad(self, theta: np.ndarray, weights: np.ndarray) -> np.ndarray:
        """sum_{x,y} weights[x,y] * grad_theta s(x,y;theta), shape (n_params,)."""
        raise NotImplementedError

    def score(self, theta: np.ndarray, x: int, y: int) -> float:
        theta = check_params(theta, self.n_params)
        self._check_indices(x, y)
        return float(self.score_table(theta)[x, y])

    def score_grad(self, theta: np.ndarray, x: int, y: int) -> np.ndarray:
        theta = check_params(theta, self.n_params)
        self._check_indices(x, y)
        w = np.zeros((self.m_x, self.m_y))
        w[x, y] = 1.0
        return self.accumulate_grad(theta, w)

    def grad_table(self, theta: np.ndarray) -> np.ndarray:
        """Per-pair gradients, shape (m_x, m_y, n_params).

        Dense; intended for the small tabular problems used in the
        asymptotics module, not for LM-scale scoring functions.
        """
        theta = check_params(theta, self.n_params)
        out = np.empty((self.m_x, self.m_y, self.n_params))
        for x in range(self.m_x):
            for y in range(self.m_y):
                out[x, y] = self.score_grad(theta, x, y)
        return out

    def _check_indices(self, x: int, y: int) -> None:
        if not (0 <= x < self.m_x):
            raise ValidationError(f"x index {x} out of range [0, {self.m_x})")
        if not (0 <= y < self.m_y):
            raise ValidationError(f"y index {y} out of range [0, {self.m_y})")


class LinearFeatures(ScoringFunction):
    """s(x,y;theta) = theta . f(x,y) with a dense feature table f."""

    def __init__(self, features: np.ndarray):
        features = _readonly(features)
        if features.ndim != 3:
            raise ValidationError(
                f"linear-features: table must be (m_x, m_y, d), got {features.shape}"
            )
        self.features = features
        self.m_x, self.m_y, self.n_params = features.shape

    def score_table(self, theta: np.ndarray) -> np.ndarray:
        theta = check_params(theta, self.n_params)
        return self.features @ theta

    def accumulate_grad(self, theta: np.ndarray, weights: np.ndarray) -> np.ndarray:
        return np.einsum("xyd,xy->d", self.features, weights)

    def score_grad(self, theta: np.ndarray, x: int, y: int) -> np.ndarray:
        check_params(theta, self.n_params)
        self._check_indices(x, y)
        return self.features[x, y].copy()


class LinearSoftmax(ScoringFunction):
    """s(x,y;theta) = inputs[x] . theta_y, one weight row per label.

    theta is the flat row-major view of the (m_y, d) weight matrix.
    """

    def __init__(self, inputs: np.ndarray, n_labels: int):
        inputs = _readonly(inputs)
        if inputs.ndim != 2:
            raise ValidationError(
                f"linear-softmax: inputs must be (m_x, d), got {inputs.shape}"
            )
        if n_labels < 2:
            raise ValidationError(f"linear-softmax: need >= 2 labels, got {n_labels}")
        self.inputs = inputs
        self.m_x, self.dim = inputs.shape
        self.m_y = n_labels
        self.n_params = n_labels * self.dim

    def _weights(self, theta: np.ndarray) -> np.ndarray:
        return check_params(theta, self.n_params).reshape(self.m_y, self.dim)

    def score_table(self, theta: np.ndarray) -> np.ndarray:
        return self.inputs @ self._weights(theta).T

    def accumulate_grad(self, theta: np.ndarray, weights: np.ndarray) -> np.ndarray:
        self._weights(theta)
        return (weights.T @ self.inputs).ravel()

    def score_grad(self, theta: np.ndarray, x: int, y: int) -> np.ndarray:
        self._weights(theta)
        self._check_indices(x, y)
        g = np.zeros((self.m_y, self.dim))
        g[y] = self.inputs[x]
        return g.ravel()


class ContextBias(ScoringFunction):
    """s'(x,y) = inner(x,y;theta) - c_x, one extra bias parameter per input.

    The biases are appended after the inner parameters in the flat vector;
    the optimizer and the covariance code rely on that layout.
    """

    def __init__(self, inner: ScoringFunction):
        self.inner = inner
        self.m_x = inner.m_x
        self.m_y = inner.m_y
        self.n_params = inner.n_params + inner.m_x

    def split(self, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        theta = check_params(theta, self.n_params)
        return theta[: self.inner.n_params], theta[self.inner.n_params :]

    def score_table(self, theta: np.ndarray) -> np.ndarray:
        inner_theta, bias = self.split(theta)
        return self.inner.score_table(inner_theta) - bias[:, None]

    def accumulate_grad(self, theta: np.ndarray, weights: np.ndarray) -> np.ndarray:
        inner_theta, _ = self.split(theta)
        inner_grad = self.inner.accumulate_grad(inner_theta, weights)
        return np.concatenate([inner_grad, -weights.sum(axis=1)])

    def score_grad(self, theta: np.ndarray, x: int, y: int) -> np.ndarray:
        inner_theta, _ = self.split(theta)
        self._check_indices(x, y)
        bias_grad = np.zeros(self.m_x)
        bias_grad[x] = -1.0
        return np.concatenate([self.inner.score_grad(inner_theta, x, y), bias_grad])


class LogBilinear(ScoringFunction):
    """n-gram log-bilinear scorer for language modeling.

    A history x is a row of ``histories`` (word ids of the previous
    ``order - 1`` positions). With context matrices C_i, input embeddings
    r, output embeddings q and output bias b,

        s(x, y) = (sum_i C_i r[x_i]) . q_y + b_y [- c_x]

    The per-history bias c_x is optional; without it the model must absorb
    the log-partition into the bilinear part to be self-normalized.

    Flat parameter layout: C (n_ctx*dim*dim), r (V*dim), q (V*dim),
    b (V), then c (m_x) if enabled.
    """

    def __init__(self, histories: np.ndarray, vocab_size: int, dim: int,
                 context_bias: bool = False):
        histories = np.ascontiguousarray(np.asarray(histories, dtype=np.int64))
        if histories.ndim != 2 or histories.shape[0] < 1 or histories.shape[1] < 1:
            raise ValidationError(
                f"log-bilinear: histories must be (m_x, order-1), got {histories.shape}"
            )
        if histories.min() < 0 or histories.max() >= vocab_size:
            raise ValidationError("log-bilinear: history word id out of vocabulary")
        histories.flags.writeable = False
        self.histories = histories
        self.m_x, self.n_ctx = histories.shape
        self.m_y = vocab_size
        self.dim = dim
        self.context_bias = context_bias
        self.n_params = (
            self.n_ctx * dim * dim + 2 * vocab_size * dim + vocab_size
            + (self.m_x if context_bias else 0)
        )
        self._history_index = {tuple(row): i for i, row in enumerate(histories)}

    def history_index(self, history: tuple[int, ...]) -> int | None:
        """Row index of a history tuple, or None if it is not in the table."""
        return self._history_index.get(tuple(history))

    def unpack(self, theta: np.ndarray):
        theta = check_params(theta, self.n_params)
        v, dim = self.m_y, self.dim
        n_c = self.n_ctx * dim * dim
        ctx_mats = theta[:n_c].reshape(self.n_ctx, dim, dim)
        r = theta[n_c : n_c + v * dim].reshape(v, dim)
        q = theta[n_c + v * dim : n_c + 2 * v * dim].reshape(v, dim)
        b = theta[n_c + 2 * v * dim : n_c + 2 * v * dim + v]
        c = theta[n_c + 2 * v * dim + v :] if self.context_bias else None
        return ctx_mats, r, q, b, c

    def _context_reps(self, ctx_mats, r) -> np.ndarray:
        reps = np.zeros((self.m_x, self.dim))
        for i in range(self.n_ctx):
            reps += r[self.histories[:, i]] @ ctx_mats[i].T
        return reps

    def score_table(self, theta: np.ndarray) -> np.ndarray:
        ctx_mats, r, q, b, c = self.unpack(theta)
        table = self._context_reps(ctx_mats, r) @ q.T + b[None, :]
        if c is not None:
            table = table - c[:, None]
        return table

    def accumulate_grad(self, theta: np.ndarray, weights: np.ndarray) -> np.ndarray:
        ctx_mats, r, q, b, c = self.unpack(theta)
        reps = self._context_reps(ctx_mats, r)
        d_q = weights.T @ reps
        d_b = weights.sum(axis=0)
        d_reps = weights @ q
        d_ctx = np.empty_like(ctx_mats)
        d_r = np.zeros_like(r)
        for i in range(self.n_ctx):
            r_i = r[self.histories[:, i]]
            d_ctx[i] = d_reps.T @ r_i
            np.add.at(d_r, self.histories[:, i], d_reps @ ctx_mats[i])
        parts = [d_ctx.ravel(), d_r.ravel(), d_q.ravel(), d_b]
        if c is not None:
            parts.append(-weights.sum(axis=1))
        return np.concatenate(parts)

    def score_grad(self, theta: np.ndarray, x: int, y: int) -> np.ndarray:
        self._check_indices(x, y)
        ctx_mats, r, q, b, c = self.unpack(theta)
        rep = np.zeros(self.dim)
        for i in range(self.n_ctx):
            rep += ctx_mats[i] @ r[self.histories[x, i]]
        d_ctx = np.zeros_like(ctx_mats)
        d_r = np.zeros_like(r)
        for i in range(self.n_ctx):
            d_ctx[i] = np.outer(q[y], r[self.histories[x, i]])
            d_r[self.histories[x, i]] += ctx_mats[i].T @ q[y]
        d_q = np.zeros_like(q)
        d_q[y] = rep
        d_b = np.zeros(self.m_y)
        d_b[y] = 1.0
        parts = [d_ctx.ravel(), d_r.ravel(), d_q.ravel(), d_b]
        if c is not None:
            d_c = np.zeros(self.m_x)
            d_c[x] = -1.0
            parts.append(d_c)
        return np.concatenate(parts)


def shifted_score(sf: ScoringFunction, theta: np.ndarray, noise, x: int, y: int) -> float:
    """Noise-corrected score s(x,y;theta) - log p_N(y)."""
    mass = float(np.asarray(noise.probs)[y])
    if mass <= 0.0:
        raise ValidationError(f"noise distribution has zero mass at label {y}")
    return sf.score(theta, x, y) - float(np.asarray(noise.log_probs)[y])


def log_partition(sf: ScoringFunction, theta: np.ndarray, x: int) -> float:
    theta = check_params(theta, sf.n_params)
    sf._check_indices(x, 0)
    return float(logsumexp(sf.score_table(theta)[x]))


def partition(sf: ScoringFunction, theta: np.ndarray, x: int) -> float:
    """Z(x;theta) = sum_y exp s(x,y;theta), via max-shifted log-sum-exp."""
    with np.errstate(over="ignore"):
        value = float(np.exp(log_partition(sf, theta, x)))
    if not np.isfinite(value) or value <= 0.0:
        raise NumericError(f"partition function overflow at x={x}")
    return value


def cond_prob(sf: ScoringFunction, theta: np.ndarray, x: int) -> np.ndarray:
    """Model conditional p(.|x;theta) as a probability vector over labels."""
    theta = check_params(theta, sf.n_params)
    sf._check_indices(x, 0)
    return np.exp(log_softmax(sf.score_table(theta)[x]))


def log_cond_prob_table(sf: ScoringFunction, theta: np.ndarray) -> np.ndarray:
    """log p(y|x;theta) for every pair, shape (m_x, m_y)."""
    theta = check_params(theta, sf.n_params)
    return log_softmax(sf.score_table(theta), axis=1)


def cond_prob_table(sf: ScoringFunction, theta: np.ndarray) -> np.ndarray:
    return np.exp(log_cond_prob_table(sf, theta))


def _check_prob_vector(p: np.ndarray, name: str) -> np.ndarray:
    p = _readonly(p)
    if p.ndim != 1:
        raise ValidationError(f"{name}: expected a vector, got shape {p.shape}")
    if np.any(p <= 0.0):
        raise ValidationError(f"{name}: all entries must be > 0")
    total = float(p.sum())
    if abs(total - 1.0) > PROB_TOL:
        raise ValidationError(f"{name}: must sum to 1 within {PROB_TOL}, got {total!r}")
    return p


@dataclass
class ConditionalProblem:
    """Finite ground truth: spaces, p_X, p_{Y|X}, optional (sf, theta*, gamma*).

    A present ``gamma_star`` asserts perfect self-normalization:
    sum_y exp(s(x,y;theta*) - gamma*) = 1 for every x, checked at
    construction within 1e-10.
    """

    input_space: InputSpace
    label_space: LabelSpace
    p_x: np.ndarray
    p_y_given_x: np.ndarray
    scoring: ScoringFunction | None = None
    theta_star: np.ndarray | None = None
    gamma_star: float | None = None

    def __post_init__(self) -> None:
        self.p_x = _check_prob_vector(self.p_x, "p_x")
        if self.p_x.shape[0] != self.input_space.size:
            raise ValidationError(
                f"p_x: length {self.p_x.shape[0]} != input space size {self.input_space.size}"
            )
        p = _readonly(self.p_y_given_x)
        if p.shape != (self.input_space.size, self.label_space.size):
            raise ValidationError(
                f"p_y_given_x: expected shape ({self.input_space.size}, "
                f"{self.label_space.size}), got {p.shape}"
            )
        if np.any(p <= 0.0):
            raise ValidationError("p_y_given_x: all entries must be > 0")
        row_sums = p.sum(axis=1)
        bad = np.argmax(np.abs(row_sums - 1.0))
        if abs(row_sums[bad] - 1.0) > PROB_TOL:
            raise ValidationError(
                f"p_y_given_x: row {bad} sums to {row_sums[bad]!r}, not 1 within {PROB_TOL}"
            )
        self.p_y_given_x = p
        if self.theta_star is not None:
            if self.scoring is None:
                raise ValidationError("theta_star given without a scoring function")
            self.theta_star = check_params(self.theta_star, self.scoring.n_params)
            if (self.scoring.m_x, self.scoring.m_y) != (self.m_x, self.m_y):
                raise ValidationError("scoring function shape does not match the spaces")
            if self.gamma_star is not None:
                table = self.scoring.score_table(self.theta_star)
                norms = np.exp(logsumexp(table - self.gamma_star, axis=1))
                worst = float(np.max(np.abs(norms - 1.0)))
                if worst > SELF_NORM_TOL:
                    raise ValidationError(
                        f"gamma_star: sum_y exp(s - gamma) deviates from 1 by {worst:.3e}"
                    )
        elif self.gamma_star is not None:
            raise ValidationError("gamma_star given without theta_star")

    @property
    def m_x(self) -> int:
        return self.input_space.size

    @property
    def m_y(self) -> int:
        return self.label_space.size

    @property
    def p_xy(self) -> np.ndarray:
        """Joint table p_X(x) * p_{Y|X}(y|x), shape (m_x, m_y)."""
        return self.p_x[:, None] * self.p_y_given_x

    def to_json_dict(self) -> dict:
        sf = self.scoring
        out: dict = {
            "m_x": self.m_x,
            "m_y": self.m_y,
            "p_x": self.p_x.tolist(),
            "p_y_given_x": self.p_y_given_x.ravel().tolist(),
        }
        if sf is None:
            out["variant"] = None
            out["d"] = 0
            return out
        variant, inner = _variant_tag(sf)
        out["variant"] = variant
        if isinstance(inner, LinearFeatures):
            out["features"] = inner.features.ravel().tolist()
            out["d"] = inner.features.shape[2]
        elif isinstance(inner, LinearSoftmax):
            out["features"] = inner.inputs.ravel().tolist()
            out["d"] = inner.dim
        else:
            raise ValidationError(f"cannot serialize scoring variant {type(inner).__name__}")
        if self.theta_star is not None:
            out["theta_star"] = self.theta_star.tolist()
        if self.gamma_star is not None:
            out["gamma_star"] = self.gamma_star
        return out

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json_dict(), f)
            f.write("\n")

    @classmethod
    def from_json_dict(cls, obj: dict) -> "ConditionalProblem":
        for field in ("m_x", "m_y", "p_x", "p_y_given_x"):
            if field not in obj:
                raise ValidationError(f"problem json: missing field '{field}'")
        m_x, m_y = int(obj["m_x"]), int(obj["m_y"])
        p_x = np.asarray(obj["p_x"], dtype=np.float64)
        p_yx = np.asarray(obj["p_y_given_x"], dtype=np.float64)
        if p_yx.size != m_x * m_y:
            raise ValidationError(
                f"p_y_given_x: expected {m_x * m_y} entries, got {p_yx.size}"
            )
        p_yx = p_yx.reshape(m_x, m_y)
        variant = obj.get("variant")
        scoring = None
        if variant is not None:
            d = int(obj.get("d", 0))
            if "features" not in obj:
                raise ValidationError("problem json: variant given without 'features'")
            feats = np.asarray(obj["features"], dtype=np.float64)
            base = variant.removeprefix("context-bias:")
            if base == "linear-features":
                if feats.size != m_x * m_y * d:
                    raise ValidationError(
                        f"features: expected {m_x * m_y * d} entries, got {feats.size}"
                    )
                scoring = LinearFeatures(feats.reshape(m_x, m_y, d))
            elif base == "linear-softmax":
                if feats.size != m_x * d:
                    raise ValidationError(
                        f"features: expected {m_x * d} entries, got {feats.size}"
                    )
                scoring = LinearSoftmax(feats.reshape(m_x, d), m_y)
            else:
                raise ValidationError(f"problem json: unknown variant '{variant}'")
            if variant.startswith("context-bias:"):
                scoring = ContextBias(scoring)
        theta_star = obj.get("theta_star")
        if theta_star is not None:
            theta_star = np.asarray(theta_star, dtype=np.float64)
        gamma_star = obj.get("gamma_star")
        return cls(
            input_space=InputSpace(m_x),
            label_space=LabelSpace(m_y),
            p_x=p_x,
            p_y_given_x=p_yx,
            scoring=scoring,
            theta_star=theta_star,
            gamma_star=None if gamma_star is None else float(gamma_star),
        )

    @classmethod
    def load(cls, path: str) -> "ConditionalProblem":
        with open(path, encoding="utf-8") as f:
            try:
                obj = json.load(f)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"problem json: {exc}") from exc
        return cls.from_json_dict(obj)


def _variant_tag(sf: ScoringFunction) -> tuple[str, ScoringFunction]:
    if isinstance(sf, ContextBias):
        inner_tag, inner = _variant_tag(sf.inner)
        if inner_tag.startswith("context-bias:"):
            raise ValidationError("nested context-bias wrappers are not serializable")
        return f"context-bias:{inner_tag}", inner
    if isinstance(sf, LinearFeatures):
        return "linear-features", sf
    if isinstance(sf, LinearSoftmax):
        return "linear-softmax", sf
    if isinstance(sf, LogBilinear):
        return "log-bilinear", sf
    raise ValidationError(f"unknown scoring variant {type(sf).__name__}")


def problem_from_scores(
    scoring: ScoringFunction,
    theta_star: np.ndarray,
    p_x: np.ndarray,
    gamma_star: float | None = None,
) -> ConditionalProblem:
    """Build the ground-truth problem whose conditionals are the model's own."""
    p_yx = cond_prob_table(scoring, theta_star)
    return ConditionalProblem(
        input_space=InputSpace(scoring.m_x),
        label_space=LabelSpace(scoring.m_y),
        p_x=np.asarray(p_x, dtype=np.float64),
        p_y_given_x=p_yx,
        scoring=scoring,
        theta_star=np.asarray(theta_star, dtype=np.float64),
        gamma_star=gamma_star,
    )
