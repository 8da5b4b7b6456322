"""Fisher information and NCE asymptotic covariances against oracles."""

import itertools

import numpy as np
import pytest
from scipy.special import log_expit, log_softmax

from ncelab import (
    BinaryParams,
    FitConfig,
    LinearFeatures,
    NoiseDistribution,
    ValidationError,
    binary_asymptotic_cov,
    fisher_information,
    make_self_normalized_problem,
    mse_infinity,
    population_binary_objective,
    problem_from_scores,
    random_tabular_problem,
    ranking_asymptotic_cov,
    replicate,
)
from ncelab.asymptotics import CovarianceReport, decomposition_gap


def two_label_problem(theta0=0.0):
    """d=1 model s = theta * 1{y=1} over a single context."""
    features = np.zeros((1, 2, 1))
    features[0, 1, 0] = 1.0
    return problem_from_scores(
        LinearFeatures(features), np.array([theta0]), p_x=np.array([1.0])
    )


class TestFisherInformation:
    def test_constant_gradient_zero_information(self):
        features = np.tile(np.array([1.0, -2.0]), (3, 4, 1))
        prob = problem_from_scores(
            LinearFeatures(features), np.zeros(2), p_x=np.full(3, 1 / 3)
        )
        np.testing.assert_allclose(
            fisher_information(prob, prob.scoring, prob.theta_star), 0.0, atol=1e-15
        )

    def test_bernoulli_variance(self):
        prob = two_label_problem(theta0=0.0)
        info = fisher_information(prob, prob.scoring, prob.theta_star)
        assert info[0, 0] == pytest.approx(0.25, abs=1e-14)
        # direct-summation oracle at a non-symmetric point
        prob2 = two_label_problem(theta0=0.8)
        p1 = 1 / (1 + np.exp(-0.8))
        info2 = fisher_information(prob2, prob2.scoring, prob2.theta_star)
        assert info2[0, 0] == pytest.approx(p1 * (1 - p1), abs=1e-14)

    def test_self_normalized_equals_joint_variance(self):
        prob = make_self_normalized_problem(5, 4, 3, seed=38)
        sf, ts = prob.scoring, prob.theta_star
        info = fisher_information(prob, sf, ts)
        grads = sf.grad_table(ts)
        mean = np.einsum("xy,xyd->d", prob.p_xy, grads)
        second = np.einsum("xy,xyd,xye->de", prob.p_xy, grads, grads)
        joint_var = second - np.outer(mean, mean)
        np.testing.assert_allclose(info, joint_var, atol=1e-10)


class TestRankingCov:
    def test_mixed_outer_product_symmetry(self):
        # the posterior-weighted outer product equals its cross form
        # E[sum_j q_j g_0 g_j^T] by exhaustive enumeration
        prob = random_tabular_problem(2, 3, 2, seed=7)
        sf, ts = prob.scoring, prob.theta_star
        noise = NoiseDistribution.uniform(3)
        k = 2
        report = ranking_asymptotic_cov(prob, sf, ts, noise, k, mode="exact")
        grads = sf.grad_table(ts)
        shat = sf.score_table(ts) - noise.log_probs[None, :]
        d = sf.n_params
        w_cross = np.zeros((d, d))
        term1 = np.einsum("xy,xyd,xye->de", prob.p_xy, grads, grads)
        for x in range(prob.m_x):
            for labels in itertools.product(range(prob.m_y), repeat=k + 1):
                labels = np.array(labels)
                weight = (
                    prob.p_x[x]
                    * prob.p_y_given_x[x, labels[0]]
                    * np.prod(noise.probs[labels[1:]])
                )
                q = np.exp(log_softmax(shat[x, labels]))
                g = grads[x, labels]
                w_cross += weight * np.einsum("k,d,ke->de", q, g[0], g)
        information_cross = term1 - 0.5 * (w_cross + w_cross.T)
        np.testing.assert_allclose(report.information, information_cross, atol=1e-10)

    def test_inverse_gap_decreases_with_k(self):
        prob = make_self_normalized_problem(4, 3, 2, seed=38)
        sf, ts = prob.scoring, prob.theta_star
        noise = NoiseDistribution.uniform(3)
        fisher_inv = np.linalg.inv(fisher_information(prob, sf, ts))
        gaps = []
        for k in (1, 2, 4, 8):
            rep = ranking_asymptotic_cov(prob, sf, ts, noise, k, mode="exact")
            gaps.append(np.linalg.norm(rep.inverse - fisher_inv, 2))
        assert gaps[0] > gaps[1] > gaps[2] > gaps[3]

    def test_monte_carlo_agrees_with_exact(self):
        prob = make_self_normalized_problem(6, 4, 3, seed=38)
        sf, ts = prob.scoring, prob.theta_star
        noise = NoiseDistribution.uniform(4)
        exact = ranking_asymptotic_cov(prob, sf, ts, noise, 4, mode="exact")
        mc = ranking_asymptotic_cov(
            prob, sf, ts, noise, 4, mode="mc", num_samples=400_000, seed=2
        )
        gap = np.abs(mc.information - exact.information)
        assert np.all(gap <= 4 * mc.information_stderr + 1e-12)

    def test_budget_error(self):
        from ncelab import BudgetError

        prob = random_tabular_problem(3, 10, 2, seed=9)
        noise = NoiseDistribution.uniform(10)
        with pytest.raises(BudgetError):
            ranking_asymptotic_cov(
                prob, prob.scoring, prob.theta_star, noise, 8, mode="exact"
            )

    def test_integral_identity_spot_check(self):
        # E[sum_j q_j f(x, y_j)] = E[f(x, y_0)] for arbitrary vector f
        prob = random_tabular_problem(2, 3, 2, seed=13)
        sf, ts = prob.scoring, prob.theta_star
        noise = NoiseDistribution(np.array([0.5, 0.3, 0.2]))
        shat = sf.score_table(ts) - noise.log_probs[None, :]
        rng = np.random.default_rng(3)
        k = 2
        for _ in range(5):
            f = rng.standard_normal((2, 3, 4))
            lhs = np.zeros(4)
            rhs = np.zeros(4)
            for x in range(2):
                for labels in itertools.product(range(3), repeat=k + 1):
                    labels = np.array(labels)
                    weight = (
                        prob.p_x[x]
                        * prob.p_y_given_x[x, labels[0]]
                        * np.prod(noise.probs[labels[1:]])
                    )
                    q = np.exp(log_softmax(shat[x, labels]))
                    lhs += weight * (q @ f[x, labels])
                    rhs += weight * f[x, labels[0]]
            np.testing.assert_allclose(lhs, rhs, atol=1e-10)


class TestBinaryCov:
    def test_decomposition_identity_at_truth(self):
        prob = make_self_normalized_problem(6, 4, 3, seed=38)
        noise = NoiseDistribution.uniform(4)
        for k in (1, 4, 16):
            gap = decomposition_gap(
                prob, prob.scoring, prob.theta_star, prob.gamma_star, noise, k
            )
            assert gap <= 1e-10

    def test_rejects_non_self_normalized_problems(self):
        prob = random_tabular_problem(3, 4, 2, seed=15)
        noise = NoiseDistribution.uniform(4)
        with pytest.raises(ValidationError, match="self-normalized"):
            binary_asymptotic_cov(prob, prob.scoring, prob.theta_star, 0.0, noise, 4)

    def test_inverse_gap_rate_in_k(self):
        prob = make_self_normalized_problem(6, 4, 3, seed=38)
        sf, ts = prob.scoring, prob.theta_star
        noise = NoiseDistribution.uniform(4)
        fisher_inv = np.linalg.inv(fisher_information(prob, sf, ts))
        ks = np.array([4, 8, 16, 32, 64, 128, 256, 512])
        gaps = [
            np.linalg.norm(
                binary_asymptotic_cov(prob, sf, ts, 0.0, noise, int(k)).inverse
                - fisher_inv,
                2,
            )
            for k in ks
        ]
        assert all(b < a for a, b in zip(gaps, gaps[1:]))
        slope = np.polyfit(np.log(ks), np.log(gaps), 1)[0]
        assert slope <= -0.9

    def test_sandwich_matches_numerical_oracle(self):
        # independent oracle: Hessian of the exact population objective by
        # finite differences, score variance by exhaustive tuple enumeration
        # with per-tuple finite-difference gradients
        prob = make_self_normalized_problem(2, 2, 1, seed=4)
        sf, ts, gs = prob.scoring, prob.theta_star, prob.gamma_star
        noise = NoiseDistribution.uniform(2)
        k = 3
        report = binary_asymptotic_cov(prob, sf, ts, gs, noise, k)

        beta_star = np.array([ts[0], gs])
        h = 1e-4  # second differences: error O(h^2) + O(eps/h^2), optimal near eps**0.25

        def pop(beta):
            return population_binary_objective(
                sf, BinaryParams(beta[:1], beta[1]), prob, noise, k
            )

        hess = np.empty((2, 2))
        for i in range(2):
            for j in range(2):
                pp = beta_star.copy(); pp[i] += h; pp[j] += h
                pm = beta_star.copy(); pm[i] += h; pm[j] -= h
                mp = beta_star.copy(); mp[i] -= h; mp[j] += h
                mm = beta_star.copy(); mm[i] -= h; mm[j] -= h
                hess[i, j] = (pop(pp) - pop(pm) - pop(mp) + pop(mm)) / (4 * h * h)
        a_oracle = -hess
        h = 1e-5

        def tuple_loss(beta, x, labels):
            table = sf.score_table(beta[:1]) - noise.log_probs[None, :]
            stilde = table - beta[1] - np.log(k)
            return float(
                log_expit(stilde[x, labels[0]]) + log_expit(-stilde[x, labels[1:]]).sum()
            )

        b_oracle = np.zeros((2, 2))
        mean_grad = np.zeros(2)
        for x in range(prob.m_x):
            for labels in itertools.product(range(2), repeat=k + 1):
                labels = np.array(labels)
                weight = (
                    prob.p_x[x]
                    * prob.p_y_given_x[x, labels[0]]
                    * np.prod(noise.probs[labels[1:]])
                )
                grad = np.empty(2)
                for i in range(2):
                    up, down = beta_star.copy(), beta_star.copy()
                    up[i] += h
                    down[i] -= h
                    grad[i] = (tuple_loss(up, x, labels) - tuple_loss(down, x, labels)) / (2 * h)
                b_oracle += weight * np.outer(grad, grad)
                mean_grad += weight * grad
        np.testing.assert_allclose(mean_grad, 0.0, atol=1e-8)
        a_inv = np.linalg.inv(a_oracle)
        v_oracle = a_inv @ b_oracle @ a_inv
        assert report.inverse[0, 0] == pytest.approx(v_oracle[0, 0], abs=1e-6)


class TestMseInfinity:
    def test_identity_matrix(self):
        rep = CovarianceReport("mle", 1, np.eye(3), np.eye(3), "exact", 1.0)
        assert mse_infinity(rep) == pytest.approx(1.0)

    def test_diagonal(self):
        inv = np.diag([1.0, 2.0, 3.0])
        rep = CovarianceReport("mle", 1, np.linalg.inv(inv), inv, "exact", 2.0)
        assert mse_infinity(rep) == pytest.approx(2.0)
        assert mse_infinity(rep) == pytest.approx(np.mean(np.linalg.eigvalsh(inv)))


class TestInformationOrdering:
    def test_nce_never_beats_fisher(self):
        prob = make_self_normalized_problem(6, 4, 3, seed=38)
        sf, ts = prob.scoring, prob.theta_star
        noise = NoiseDistribution.uniform(4)
        fisher_trace = np.trace(np.linalg.inv(fisher_information(prob, sf, ts)))
        for k in (1, 2, 4):
            rep = ranking_asymptotic_cov(prob, sf, ts, noise, k, mode="exact")
            assert np.trace(rep.inverse) >= fisher_trace - 1e-8
        for k in (4, 64, 512):
            rep = binary_asymptotic_cov(prob, sf, ts, 0.0, noise, k)
            assert np.trace(rep.inverse) >= fisher_trace - 1e-8


class TestReplicate:
    def test_identical_seeds_zero_covariance(self):
        prob = random_tabular_problem(3, 4, 2, seed=21)
        noise = NoiseDistribution.uniform(4)
        summary = replicate(
            prob,
            FitConfig(objective="mle"),
            noise,
            k=1,
            n=500,
            replications=2,
            seeds=[123, 123],
        )
        np.testing.assert_allclose(summary.empirical_cov, 0.0, atol=1e-20)

    def test_mle_replication_smoke(self):
        prob = random_tabular_problem(3, 4, 2, seed=23)
        noise = NoiseDistribution.uniform(4)
        summary = replicate(
            prob,
            FitConfig(objective="mle", tol=1e-6),
            noise,
            k=1,
            n=4000,
            replications=60,
            seeds=0,
        )
        assert summary.rel_frobenius_error <= 0.6
        assert summary.empirical_mse == pytest.approx(summary.theoretical_mse, rel=0.6)
