"""Distances between true and estimated conditionals, plus LM perplexity.

KL runs in the direction KL(true || estimated), averaged over contexts
under p_X: an estimator that misses true support mass is penalized, and
both metrics inherit the conditional model's invariance to per-context
score shifts.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import NumericError, ValidationError
from .model import ConditionalProblem, LogBilinear, ScoringFunction, log_cond_prob_table


@dataclass(frozen=True)
class EvalResult:
    kl: float
    d_metric: float
    worst_tv: float

    def to_json_dict(self) -> dict:
        return {"kl": self.kl, "d_metric": self.d_metric, "worst_tv": self.worst_tv}


def _check_shapes(problem: ConditionalProblem, sf: ScoringFunction) -> None:
    if (sf.m_x, sf.m_y) != (problem.m_x, problem.m_y):
        raise ValidationError(
            f"scoring function shape ({sf.m_x}, {sf.m_y}) does not match "
            f"problem ({problem.m_x}, {problem.m_y})"
        )


def kl_divergence(problem: ConditionalProblem, sf: ScoringFunction, theta: np.ndarray) -> float:
    """sum_x p_X(x) KL( p_{Y|X}(.|x) || p(.|x;theta) )."""
    _check_shapes(problem, sf)
    log_q = log_cond_prob_table(sf, theta)
    if np.any(np.isneginf(log_q)):
        raise NumericError("estimated conditional has an exactly-zero entry")
    p = problem.p_y_given_x
    per_cell = p * (np.log(p) - log_q)
    return float(problem.p_x @ per_cell.sum(axis=1))


def d_metric(problem: ConditionalProblem, sf: ScoringFunction, theta: np.ndarray) -> float:
    """sum_{x,y} p_XY(x,y) (phat(y|x) - p(y|x))^2."""
    _check_shapes(problem, sf)
    q = np.exp(log_cond_prob_table(sf, theta))
    return float(np.sum(problem.p_xy * (q - problem.p_y_given_x) ** 2))


def worst_case_tv(problem: ConditionalProblem, sf: ScoringFunction, theta: np.ndarray) -> float:
    """max_x total variation between true and estimated conditionals."""
    _check_shapes(problem, sf)
    q = np.exp(log_cond_prob_table(sf, theta))
    return float(0.5 * np.max(np.abs(q - problem.p_y_given_x).sum(axis=1)))


def evaluate(problem: ConditionalProblem, sf: ScoringFunction, theta: np.ndarray) -> EvalResult:
    return EvalResult(
        kl=kl_divergence(problem, sf, theta),
        d_metric=d_metric(problem, sf, theta),
        worst_tv=worst_case_tv(problem, sf, theta),
    )


def perplexity(
    sf: ScoringFunction,
    theta: np.ndarray,
    tokens,
    order: int,
    history_lookup: Callable[[tuple[int, ...]], int | None] | None = None,
) -> float:
    """exp(-mean log phat(y_t | history_t)) over scoreable positions.

    ``tokens`` is a sequence of label ids already mapped into the model's
    vocabulary (OOV handling happens upstream at the reserved token).
    ``order`` is the n-gram order, so each history is the previous
    order-1 tokens and scoring starts at position order-1. The default
    history lookup uses the scoring function's own history table.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if order < 2:
        raise ValidationError(f"history order must be >= 2, got {order}")
    if tokens.size < order:
        raise ValidationError(
            f"token stream too short: {tokens.size} tokens for order {order}"
        )
    if tokens.size and (tokens.min() < 0 or tokens.max() >= sf.m_y):
        raise ValidationError("token id outside the model vocabulary")
    if history_lookup is None:
        if not isinstance(sf, LogBilinear):
            raise ValidationError(
                "perplexity needs a history_lookup for non log-bilinear scorers"
            )
        history_lookup = sf.history_index
    log_q = log_cond_prob_table(sf, theta)
    width = order - 1
    total = 0.0
    count = 0
    for t in range(width, tokens.size):
        x = history_lookup(tuple(tokens[t - width : t]))
        if x is None:
            raise ValidationError(
                f"history at position {t} is not in the model's history table"
            )
        total += log_q[x, tokens[t]]
        count += 1
    if count == 0:
        raise ValidationError("no scoreable positions in the token stream")
    return float(np.exp(-total / count))
