import numpy as np
import pytest

from calipool.clogit import (
    ClogitProblem,
    fit,
    information,
    loglik,
    score,
    stratum_scores,
)
from calipool.errors import SingularDesignError


def random_problem(rng, n_strata=8, p=2, max_controls=4):
    blocks = [rng.normal(size=(rng.integers(1, max_controls + 1), p))
              for _ in range(n_strata)]
    return ClogitProblem.from_blocks(blocks)


def fd_gradient(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for k in range(len(x)):
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (f(x + e) - f(x - e)) / (2 * h)
    return g


class TestLoglik:
    def test_beta_zero_one_to_one(self):
        prob = ClogitProblem.from_blocks([np.array([[-1.0]])])
        assert loglik(prob, [0.0]) == pytest.approx(np.log(0.5))

    def test_beta_zero_one_to_m(self):
        m = 5
        prob = ClogitProblem.from_blocks([np.ones((m, 1))])
        assert loglik(prob, [0.0]) == pytest.approx(-np.log(1 + m))

    def test_scalar_example(self):
        prob = ClogitProblem.from_blocks([np.array([[-1.0]])])
        assert loglik(prob, [0.5]) == pytest.approx(-np.log1p(np.exp(-0.5)), abs=1e-10)

    def test_overflow_safe(self):
        prob = ClogitProblem.from_blocks([np.array([[1000.0]]), np.array([[-1000.0]])])
        val = loglik(prob, [1.0])
        assert np.isfinite(val)
        assert val == pytest.approx(-1000.0, rel=1e-6)

    def test_rejects_nonfinite_beta(self):
        prob = ClogitProblem.from_blocks([np.array([[1.0]])])
        with pytest.raises(ValueError):
            loglik(prob, [np.nan])

    def test_zero_row_stratum_adds_constant(self):
        rng = np.random.default_rng(3)
        blocks = [rng.normal(size=(2, 2)) for _ in range(5)]
        base = ClogitProblem.from_blocks(blocks)
        extended = ClogitProblem.from_blocks(blocks + [np.zeros((3, 2))])
        beta = rng.normal(size=2)
        assert loglik(extended, beta) == pytest.approx(
            loglik(base, beta) - np.log(4), abs=1e-12
        )


class TestDerivatives:
    def test_score_at_zero_is_uniform_average(self):
        rng = np.random.default_rng(1)
        d = rng.normal(size=(3, 2))
        prob = ClogitProblem.from_blocks([d])
        np.testing.assert_allclose(score(prob, np.zeros(2)), -d.sum(axis=0) / 4)

    @pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
    def test_score_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        prob = random_problem(rng, p=3)
        beta = rng.normal(size=3) * 0.5
        g = score(prob, beta)
        g_fd = fd_gradient(lambda b: loglik(prob, b), beta)
        np.testing.assert_allclose(g, g_fd, rtol=1e-6, atol=1e-8)

    @pytest.mark.parametrize("seed", [5, 6, 7])
    def test_information_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        prob = random_problem(rng, p=2)
        beta = rng.normal(size=2) * 0.5
        info = information(prob, beta)
        for k in range(2):
            e = np.zeros(2)
            e[k] = 1e-5
            col = (score(prob, beta + e) - score(prob, beta - e)) / 2e-5
            np.testing.assert_allclose(-col, info[:, k], rtol=1e-5, atol=1e-7)

    def test_information_psd_everywhere(self):
        rng = np.random.default_rng(9)
        prob = random_problem(rng, n_strata=12, p=3)
        for _ in range(10):
            beta = rng.normal(size=3)
            eigs = np.linalg.eigvalsh(information(prob, beta))
            assert eigs.min() >= -1e-10

    def test_stratum_scores_sum_to_score(self):
        rng = np.random.default_rng(13)
        prob = random_problem(rng, n_strata=6, p=2)
        beta = rng.normal(size=2)
        np.testing.assert_allclose(stratum_scores(prob, beta).sum(axis=0),
                                   score(prob, beta), atol=1e-12)


class TestFit:
    def test_all_zero_rows_is_singular(self):
        prob = ClogitProblem.from_blocks([np.zeros((2, 1)), np.zeros((1, 1))])
        with pytest.raises(SingularDesignError):
            fit(prob)

    def test_symmetric_pair_gives_zero(self):
        prob = ClogitProblem.from_blocks([np.array([[1.0]]), np.array([[-1.0]])])
        res = fit(prob)
        assert res.converged
        assert res.beta[0] == pytest.approx(0.0, abs=1e-10)

    def test_separated_data_reported_not_raised(self):
        # every case exposure above its control: likelihood maximized at +inf
        prob = ClogitProblem.from_blocks([np.array([[-1.0]]) for _ in range(6)])
        res = fit(prob, max_iter=30)
        assert not res.converged
        assert res.separation
        assert res.beta[0] > 10

    def test_matches_grid_search_oracle(self):
        rng = np.random.default_rng(42)
        d = rng.normal(size=(10, 1)) - 0.4
        prob = ClogitProblem.from_blocks(list(d[:, None, :]))
        res = fit(prob)
        assert res.converged
        grid = np.linspace(-3, 3, 120001)
        vals = -np.log1p(np.exp(np.clip(d @ grid[None, :], -700, 700))).sum(axis=0)
        beta_grid = grid[int(np.argmax(vals))]
        assert res.beta[0] == pytest.approx(beta_grid, abs=1e-4)
        assert res.loglik >= vals.max() - 1e-10

    def test_scale_invariance(self):
        rng = np.random.default_rng(8)
        blocks = [rng.normal(size=(2, 1)) for _ in range(20)]
        prob = ClogitProblem.from_blocks(blocks)
        res = fit(prob)
        c = 3.7
        scaled = ClogitProblem.from_blocks([b * c for b in blocks])
        res_scaled = fit(scaled)
        assert res_scaled.beta[0] == pytest.approx(res.beta[0] / c, abs=1e-8)
        assert res_scaled.loglik == pytest.approx(res.loglik, abs=1e-8)

    def test_zero_stratum_does_not_move_optimum(self):
        rng = np.random.default_rng(15)
        blocks = [rng.normal(size=(1, 2)) for _ in range(30)]
        base = fit(ClogitProblem.from_blocks(blocks))
        padded = fit(ClogitProblem.from_blocks(blocks + [np.zeros((2, 2))]))
        np.testing.assert_allclose(padded.beta, base.beta, atol=1e-7)
        assert padded.loglik == pytest.approx(base.loglik - np.log(3), abs=1e-8)

    def test_deterministic(self):
        rng = np.random.default_rng(21)
        prob = random_problem(rng, n_strata=15, p=2)
        a = fit(prob)
        b = fit(prob)
        assert np.array_equal(a.beta, b.beta)
        assert a.loglik == b.loglik


def test_problem_validation():
    with pytest.raises(ValueError):
        ClogitProblem(rows=np.zeros((3, 1)), offsets=np.array([0, 1]))
    with pytest.raises(ValueError):
        ClogitProblem.from_blocks([])
