"""Fisher information, NCE asymptotic covariances, and replication checks.

For an M-estimator the asymptotic covariance of sqrt(n)(theta_hat -
theta*) is the sandwich A^{-1} B A^{-1} with A the expected Hessian and B
the score variance at the truth. For the ranking objective the two
factors coincide,

    A = B = E[grad shat grad shat^T] - W_K,

where W_K is the expected outer product of the posterior-weighted
candidate gradients, so the sandwich collapses to the inverse of a single
"information" matrix. Exact mode verifies the collapse numerically (the
directly enumerated score variance must match within 1e-8) before
trusting it.

For the binary objective (which requires a self-normalized truth) the
factors differ and the full sandwich is kept:

    A = Wt_K = E_{p_XY}[(1 - sig) grad grad^T],
    B = Wt_K - (K+1)/K * E_X[mu_x mu_x^T],
    mu_x = E_{Y|X=x}[(1 - sig) grad],

with gradients taken in (theta, gamma) and sig the positive-class
probability at the truth. The theta block of A^{-1} B A^{-1} is the
asymptotic covariance of theta_hat.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_softmax

from .errors import BudgetError, SingularMatrixError, ValidationError
from .model import ConditionalProblem, ScoringFunction, check_params
from .objectives import _shifted_table, _simulate_tuples, _tuple_chunks
from .optimize import FitConfig, fit
from .sampling import (
    NoiseDistribution,
    SamplingConfig,
    derive_rng,
    generate_dataset,
)

ASYMPTOTIC_TERM_BUDGET = 10**7
EIGENVALUE_FLOOR = 1e-10
SELF_NORM_PRECONDITION_TOL = 1e-8
COLLAPSE_TOL = 1e-8
MC_BATCHES = 32


@dataclass
class CovarianceReport:
    """Asymptotic covariance of sqrt(n)(theta_hat - theta*) for one estimator."""

    estimator: str
    k: int
    information: np.ndarray
    inverse: np.ndarray
    mode: str
    mse_infinity: float
    num_samples: int | None = None
    information_stderr: np.ndarray | None = None

    def to_json_dict(self) -> dict:
        out = {
            "estimator": self.estimator,
            "k": self.k,
            "mode": self.mode,
            "information": self.information.tolist(),
            "inverse": self.inverse.tolist(),
            "mse_infinity": self.mse_infinity,
        }
        if self.num_samples is not None:
            out["num_samples"] = self.num_samples
        if self.information_stderr is not None:
            out["information_stderr"] = self.information_stderr.tolist()
        return out


@dataclass
class ReplicationSummary:
    """Empirical law of sqrt(n)(theta_hat - theta*) over R replications."""

    estimator: str
    k: int
    n: int
    replications: int
    empirical_cov: np.ndarray
    mean_bias: np.ndarray
    theoretical: np.ndarray
    rel_frobenius_error: float
    empirical_mse: float
    theoretical_mse: float

    def to_json_dict(self) -> dict:
        return {
            "estimator": self.estimator,
            "k": self.k,
            "n": self.n,
            "replications": self.replications,
            "empirical_cov": self.empirical_cov.tolist(),
            "mean_bias": self.mean_bias.tolist(),
            "theoretical": self.theoretical.tolist(),
            "rel_frobenius_error": self.rel_frobenius_error,
            "empirical_mse": self.empirical_mse,
            "theoretical_mse": self.theoretical_mse,
        }


def _symmetrize(m: np.ndarray, tol: float = 1e-10, what: str = "matrix") -> np.ndarray:
    asym = float(np.max(np.abs(m - m.T))) if m.size else 0.0
    if asym > tol:
        raise ValidationError(f"{what}: asymmetry {asym:.3e} exceeds {tol}")
    return 0.5 * (m + m.T)


def invert_spd(m: np.ndarray, what: str) -> np.ndarray:
    """Inverse via eigendecomposition; loud failure under the eigenvalue floor."""
    vals, vecs = np.linalg.eigh(m)
    if vals.min() < EIGENVALUE_FLOOR:
        raise SingularMatrixError(
            f"{what}: minimum eigenvalue {vals.min():.3e} below floor {EIGENVALUE_FLOOR}"
        )
    return (vecs / vals) @ vecs.T


def fisher_information(
    problem: ConditionalProblem, sf: ScoringFunction, theta_star: np.ndarray
) -> np.ndarray:
    """E_X[ Var_{Y|X=x}[ grad s(x,y;theta*) ] ] by exact summation.

    The conditional law is the problem's stored p_{Y|X}; when the problem
    was generated from (sf, theta*) that table *is* the model conditional,
    so both readings coincide.
    """
    theta_star = check_params(theta_star, sf.n_params)
    grads = sf.grad_table(theta_star)
    cond = problem.p_y_given_x
    mean = np.einsum("xy,xyd->xd", cond, grads)
    second = np.einsum("xy,xyd,xye->xde", cond, grads, grads)
    var = second - np.einsum("xd,xe->xde", mean, mean)
    return _symmetrize(np.einsum("x,xde->de", problem.p_x, var), what="fisher information")


def mse_infinity(report: CovarianceReport) -> float:
    """Scaled asymptotic mean square error, trace(I^{-1})/d."""
    return float(np.trace(report.inverse)) / report.inverse.shape[0]


def _pair_outer_expectation(problem, grads) -> np.ndarray:
    """E_{p_XY}[ grad grad^T ]."""
    return np.einsum("xy,xyd,xye->de", problem.p_xy, grads, grads)


def ranking_asymptotic_cov(
    problem: ConditionalProblem,
    sf: ScoringFunction,
    theta_star: np.ndarray,
    noise: NoiseDistribution,
    k: int,
    mode: str = "exact",
    num_samples: int | None = None,
    seed: int = 0,
) -> CovarianceReport:
    """Asymptotic covariance of the ranking estimator at the truth.

    Exact mode enumerates negative tuples in Y^K (the positive label is
    summed out exactly per tuple) within the m_x * m_y**K term budget;
    Monte Carlo mode averages num_samples simulated tuples and attaches
    batch-means standard errors.
    """
    if k < 1:
        raise ValidationError(f"K must be >= 1, got {k}")
    theta_star = check_params(theta_star, sf.n_params)
    shat = _shifted_table(sf, theta_star, noise)
    grads = sf.grad_table(theta_star)
    d = sf.n_params
    term1 = _pair_outer_expectation(problem, grads)

    if mode == "exact":
        terms = problem.m_x * problem.m_y**k
        if terms > ASYMPTOTIC_TERM_BUDGET:
            raise BudgetError(
                f"exact ranking covariance needs {terms} tuples, over the "
                f"{ASYMPTOTIC_TERM_BUDGET} budget; use monte-carlo mode"
            )
        w_mix = np.zeros((d, d))
        score_var = np.zeros((d, d))
        log_pn = noise.log_probs
        for block in _tuple_chunks(problem.m_y, k, chunk=50_000):
            t = block.shape[0]
            log_noise_mass = log_pn[block].sum(axis=1)
            for x in range(problem.m_x):
                neg_scores = shat[x][block]                       # (T, K)
                neg_grads = grads[x][block]                       # (T, K, d)
                # candidate slot 0 ranges over all labels at once
                all_scores = np.concatenate(
                    [
                        np.broadcast_to(shat[x][:, None, None], (problem.m_y, t, 1)),
                        np.broadcast_to(neg_scores[None], (problem.m_y, t, k)),
                    ],
                    axis=2,
                )
                q = np.exp(log_softmax(all_scores, axis=2))       # (m_y, T, K+1)
                v = np.einsum("ut,ud->utd", q[:, :, 0], grads[x]) + np.einsum(
                    "utk,tkd->utd", q[:, :, 1:], neg_grads
                )
                weight = (
                    problem.p_x[x]
                    * problem.p_y_given_x[x][:, None]
                    * np.exp(log_noise_mass)[None, :]
                )
                w_mix += np.einsum("ut,utd,ute->de", weight, v, v)
                u = grads[x][:, None, :] - v                       # score of the objective
                score_var += np.einsum("ut,utd,ute->de", weight, u, u)
        information = _symmetrize(term1 - w_mix, what="ranking information")
        collapse_gap = float(np.max(np.abs(score_var - information)))
        if collapse_gap > COLLAPSE_TOL:
            raise ValidationError(
                "ranking covariance: expected-Hessian and score-variance factors "
                f"disagree by {collapse_gap:.3e} (> {COLLAPSE_TOL}); the sandwich "
                "does not collapse"
            )
        inverse = invert_spd(information, "ranking information")
        stderr = None
        m = None
    elif mode == "mc":
        if num_samples is None or num_samples < MC_BATCHES * 2:
            raise ValidationError(
                f"monte-carlo mode needs num_samples >= {MC_BATCHES * 2}"
            )
        rng = derive_rng(seed, 7)
        m = int(num_samples)
        batch_sums = np.zeros((MC_BATCHES, d, d))
        batch_counts = np.zeros(MC_BATCHES)
        chunk = max(1, min(m, 200_000 // (k + 1) + 1))
        done = 0
        while done < m:
            size = min(chunk, m - done)
            x, labels = _simulate_tuples(problem, noise, k, size, rng)
            cand_scores = shat[x[:, None], labels]
            q = np.exp(log_softmax(cand_scores, axis=1))
            cand_grads = grads[x[:, None], labels]                # (B, K+1, d)
            v = np.einsum("bk,bkd->bd", q, cand_grads)
            outer = np.einsum("bd,be->bde", v, v)
            batch_idx = (done + np.arange(size)) * MC_BATCHES // m
            np.add.at(batch_sums, batch_idx, outer)
            np.add.at(batch_counts, batch_idx, 1.0)
            done += size
        batch_means = batch_sums / batch_counts[:, None, None]
        w_mix = batch_means.mean(axis=0)
        stderr = batch_means.std(axis=0, ddof=1) / np.sqrt(MC_BATCHES)
        information = _symmetrize(term1 - w_mix, tol=np.inf, what="ranking information")
        inverse = invert_spd(information, "ranking information")
    else:
        raise ValidationError(f"unknown mode '{mode}' (expected 'exact' or 'mc')")

    report = CovarianceReport(
        estimator="ranking",
        k=k,
        information=information,
        inverse=inverse,
        mode=mode,
        mse_infinity=float(np.trace(inverse)) / d,
        num_samples=m,
        information_stderr=stderr,
    )
    _check_psd(report)
    return report


def _check_psd(report: CovarianceReport) -> None:
    for name, m in (("information", report.information), ("inverse", report.inverse)):
        vals = np.linalg.eigvalsh(0.5 * (m + m.T))
        if vals.min() < -1e-10:
            raise ValidationError(
                f"{report.estimator} {name}: negative eigenvalue {vals.min():.3e}"
            )


def binary_asymptotic_cov(
    problem: ConditionalProblem,
    sf: ScoringFunction,
    theta_star: np.ndarray,
    gamma_star: float,
    noise: NoiseDistribution,
    k: int,
) -> CovarianceReport:
    """Sandwich covariance for the binary estimator; exact over X x Y.

    Requires a self-normalized truth: sum_y exp(s(x,y;theta*) - gamma*)
    must equal 1 for every x within 1e-8.
    """
    if k < 1:
        raise ValidationError(f"K must be >= 1, got {k}")
    theta_star = check_params(theta_star, sf.n_params)
    table = sf.score_table(theta_star)
    norms = np.exp(table - gamma_star).sum(axis=1)
    worst = float(np.max(np.abs(norms - 1.0)))
    if worst > SELF_NORM_PRECONDITION_TOL:
        raise ValidationError(
            f"binary covariance needs a self-normalized problem; "
            f"sum_y exp(s - gamma*) deviates from 1 by {worst:.3e}"
        )
    stilde = table - noise.log_probs[None, :] - gamma_star - np.log(k)
    sig = expit(stilde)
    grads = sf.grad_table(theta_star)
    d = sf.n_params
    ext = np.concatenate([grads, -np.ones((sf.m_x, sf.m_y, 1))], axis=2)
    one_minus = 1.0 - sig
    wt = np.einsum("xy,xy,xyd,xye->de", problem.p_xy, one_minus, ext, ext)
    wt = _symmetrize(wt, what="binary expected Hessian")
    mu = np.einsum("xy,xy,xyd->xd", problem.p_y_given_x, one_minus, ext)
    mu_outer = np.einsum("x,xd,xe->de", problem.p_x, mu, mu)
    var = wt - (k + 1.0) / k * mu_outer
    wt_inv = invert_spd(wt, "binary expected Hessian")
    sandwich = wt_inv @ var @ wt_inv
    inverse = _symmetrize(sandwich[:d, :d], tol=1e-9, what="binary covariance")
    information = invert_spd(inverse, "binary covariance")
    report = CovarianceReport(
        estimator="binary",
        k=k,
        information=information,
        inverse=inverse,
        mode="exact",
        mse_infinity=float(np.trace(inverse)) / d,
    )
    _check_psd(report)
    return report


def decomposition_gap(
    problem: ConditionalProblem,
    sf: ScoringFunction,
    theta_star: np.ndarray,
    gamma_star: float,
    noise: NoiseDistribution,
    k: int,
) -> float:
    """Max cell gap of p_XY (1 - sig) = K p_X p_N sig at the truth."""
    stilde = (
        _shifted_table(sf, theta_star, noise) - gamma_star - np.log(k)
    )
    sig = expit(stilde)
    lhs = problem.p_xy * (1.0 - sig)
    rhs = k * problem.p_x[:, None] * noise.probs[None, :] * sig
    return float(np.max(np.abs(lhs - rhs)))


def replicate(
    problem: ConditionalProblem,
    fit_cfg: FitConfig,
    noise: NoiseDistribution | None,
    k: int,
    n: int,
    replications: int,
    seeds: int | list[int] = 0,
) -> ReplicationSummary:
    """Fit R independent datasets and compare the empirical covariance of
    sqrt(n)(theta_hat - theta*) against the theoretical matrix.

    ``seeds`` is either a master seed (per-replication seeds are derived)
    or an explicit list of length R.
    """
    if replications < 2:
        raise ValidationError(f"replications must be >= 2, got {replications}")
    if problem.theta_star is None or problem.scoring is None:
        raise ValidationError("replicate needs a problem with ground truth")
    if isinstance(seeds, int):
        seed_list = [int(derive_rng(seeds, 8, r).integers(2**63)) for r in range(replications)]
    else:
        seed_list = [int(s) for s in seeds]
        if len(seed_list) != replications:
            raise ValidationError(
                f"got {len(seed_list)} seeds for {replications} replications"
            )
    sf = problem.scoring
    theta_star = problem.theta_star
    theoretical = _theoretical_cov(problem, sf, theta_star, noise, fit_cfg.objective, k)
    # MLE ignores negatives but the dataset still carries a matrix of them
    data_noise = noise if noise is not None else NoiseDistribution.uniform(problem.m_y)
    devs = np.empty((replications, sf.n_params))
    for r, seed in enumerate(seed_list):
        dataset = generate_dataset(problem, n, SamplingConfig(k=k, seed=seed), data_noise)
        try:
            report = fit(sf, dataset, noise, fit_cfg)
        except Exception as exc:
            raise ValidationError(f"replication {r} failed: {exc}") from exc
        if report.stalled:
            raise ValidationError(f"replication {r} stalled: {report.message}")
        devs[r] = np.sqrt(n) * (report.theta - theta_star)
    mean_bias = devs.mean(axis=0)
    centered = devs - mean_bias
    empirical = centered.T @ centered / (replications - 1)
    rel = float(
        np.linalg.norm(empirical - theoretical) / np.linalg.norm(theoretical)
    )
    return ReplicationSummary(
        estimator=fit_cfg.objective,
        k=k,
        n=n,
        replications=replications,
        empirical_cov=empirical,
        mean_bias=mean_bias,
        theoretical=theoretical,
        rel_frobenius_error=rel,
        empirical_mse=float(np.mean(devs**2)),
        theoretical_mse=float(np.trace(theoretical)) / sf.n_params,
    )


def _theoretical_cov(problem, sf, theta_star, noise, estimator, k):
    if estimator == "mle":
        return invert_spd(fisher_information(problem, sf, theta_star), "fisher information")
    if estimator == "ranking":
        return ranking_asymptotic_cov(problem, sf, theta_star, noise, k).inverse
    if estimator == "binary":
        if problem.gamma_star is None:
            raise ValidationError("binary replication needs gamma_star ground truth")
        return binary_asymptotic_cov(
            problem, sf, theta_star, problem.gamma_star, noise, k
        ).inverse
    raise ValidationError(f"no theoretical covariance for estimator '{estimator}'")
