import numpy as np
import pytest

from depthbayes.errors import DomainError
from depthbayes.posterior import (
    DiagGaussian,
    SampleSet,
    checkpoint_ensemble,
    deep_ensemble,
    fit_swag_diag,
    fit_swag_lowrank,
    load_posterior,
    sample,
    save_posterior,
)

PAIR = [np.array([1.0, 3.0]), np.array([3.0, 5.0])]


class TestSwagDiag:
    def test_worked_two_checkpoint_example(self):
        posterior = fit_swag_diag(PAIR)
        np.testing.assert_allclose(posterior.mean, [2.0, 4.0], atol=1e-15)
        np.testing.assert_allclose(posterior.variance, [1.0, 1.0], atol=1e-15)

    def test_identical_checkpoints_have_zero_spread(self):
        posterior = fit_swag_diag([np.array([2.0, -1.0])] * 5)
        np.testing.assert_allclose(posterior.variance, [0.0, 0.0], atol=1e-15)

    def test_matches_two_pass_oracle(self, rng):
        checkpoints = [rng.normal(size=16) for _ in range(100)]
        posterior = fit_swag_diag(checkpoints)
        stacked = np.stack(checkpoints)
        mean = stacked.mean(axis=0)
        variance = np.mean((stacked - mean) ** 2, axis=0)
        np.testing.assert_allclose(posterior.mean, mean, atol=1e-12)
        np.testing.assert_allclose(posterior.variance, variance, atol=1e-12)

    def test_too_few_checkpoints(self):
        with pytest.raises(DomainError):
            fit_swag_diag([np.zeros(3)])


class TestSwagLowRank:
    def test_worked_covariance_example(self):
        posterior = fit_swag_lowrank(PAIR, jitter=0.0)
        np.testing.assert_allclose(
            posterior.materialized_covariance(), [[1.5, 1.0], [1.0, 1.5]], atol=1e-14
        )

    def test_identical_checkpoints_zero_covariance(self):
        posterior = fit_swag_lowrank([np.array([1.0, 2.0])] * 4, jitter=0.0)
        np.testing.assert_allclose(posterior.materialized_covariance(), np.zeros((2, 2)), atol=1e-15)

    def test_materialized_covariance_is_psd(self, rng):
        posterior = fit_swag_lowrank([rng.normal(size=8) for _ in range(5)], jitter=0.0)
        cov = posterior.materialized_covariance()
        np.testing.assert_allclose(cov, cov.T, atol=1e-14)
        assert np.linalg.eigvalsh(cov).min() >= -1e-12

    def test_diagonal_agrees_with_diag_fit(self, rng):
        checkpoints = [rng.normal(size=6) for _ in range(7)]
        np.testing.assert_array_equal(
            fit_swag_lowrank(checkpoints).variance, fit_swag_diag(checkpoints).variance
        )

    def test_materialized_equals_brute_force(self, rng):
        checkpoints = [rng.normal(size=4) for _ in range(9)]
        posterior = fit_swag_lowrank(checkpoints, jitter=0.0)
        stacked = np.stack(checkpoints)
        sample_cov = np.cov(stacked.T, ddof=1)
        brute = 0.5 * (np.diag(posterior.variance) + sample_cov)
        np.testing.assert_allclose(posterior.materialized_covariance(), brute, atol=1e-12)


class TestSampling:
    def test_degenerate_gaussian_returns_mean(self):
        posterior = DiagGaussian(mean=np.array([3.0, -1.0]), variance=np.zeros(2))
        draws = sample(posterior, 5, seed=0)
        for member in draws.members:
            np.testing.assert_array_equal(member, posterior.mean)

    def test_diag_sample_mean_within_tolerance(self):
        posterior = DiagGaussian(mean=np.array([1.0, -2.0]), variance=np.array([4.0, 0.25]))
        draws = sample(posterior, 100_000, seed=7)
        stacked = np.stack(draws.members)
        stderr = np.sqrt(posterior.variance / stacked.shape[0])
        assert np.all(np.abs(stacked.mean(axis=0) - posterior.mean) <= 4.0 * stderr)

    def test_lowrank_sample_covariance_matches(self, rng):
        checkpoints = [rng.normal(size=4) for _ in range(3)]
        posterior = fit_swag_lowrank(checkpoints, jitter=0.0)
        draws = sample(posterior, 100_000, seed=3)
        stacked = np.stack(draws.members)
        empirical = np.cov(stacked.T, ddof=1)
        np.testing.assert_allclose(empirical, posterior.materialized_covariance(), atol=5e-2)

    def test_same_seed_reproduces(self, rng):
        posterior = fit_swag_lowrank([rng.normal(size=5) for _ in range(4)])
        a = sample(posterior, 10, seed=42)
        b = sample(posterior, 10, seed=42)
        for x, y in zip(a.members, b.members):
            np.testing.assert_array_equal(x, y)
        c = sample(posterior, 10, seed=43)
        assert any(not np.array_equal(x, y) for x, y in zip(a.members, c.members))

    def test_disjoint_streams_differ_and_reproduce(self, rng):
        posterior = DiagGaussian(mean=np.zeros(3), variance=np.ones(3))
        a0 = sample(posterior, 4, seed=1, stream=0)
        a1 = sample(posterior, 4, seed=1, stream=1)
        assert any(not np.array_equal(x, y) for x, y in zip(a0.members, a1.members))
        again = sample(posterior, 4, seed=1, stream=1)
        for x, y in zip(a1.members, again.members):
            np.testing.assert_array_equal(x, y)

    def test_sample_set_passthrough_capped(self):
        members = tuple(np.full(2, float(i)) for i in range(5))
        draws = sample(SampleSet(members=members, provenance="checkpoint-ensemble"), 3, seed=0)
        assert len(draws.members) == 3
        for got, want in zip(draws.members, members):
            np.testing.assert_array_equal(got, want)

    def test_count_must_be_positive(self):
        with pytest.raises(DomainError):
            sample(DiagGaussian(mean=np.zeros(1), variance=np.ones(1)), 0, seed=0)


class TestEnsembles:
    def test_checkpoint_ensemble_identity_selection(self, rng):
        checkpoints = [rng.normal(size=3) for _ in range(6)]
        picked = checkpoint_ensemble(checkpoints, 6)
        assert len(picked.members) == 6
        for got, want in zip(picked.members, checkpoints):
            np.testing.assert_array_equal(got, want)

    def test_hundred_of_hundred(self, rng):
        checkpoints = [rng.normal(size=2) for _ in range(100)]
        picked = checkpoint_ensemble(checkpoints, 100)
        assert len(picked.members) == 100
        assert picked.provenance == "checkpoint-ensemble"

    def test_three_of_ten_takes_equidistant_with_last(self, rng):
        checkpoints = [np.full(2, float(i)) for i in range(10)]
        picked = checkpoint_ensemble(checkpoints, 3)
        assert [int(m[0]) for m in picked.members] == [3, 6, 9]

    def test_deep_ensemble_passthrough(self, rng):
        finals = [rng.normal(size=4) for _ in range(5)]
        ens = deep_ensemble(finals)
        assert len(ens.members) == 5
        assert ens.provenance == "deep-ensemble"
        for got, want in zip(ens.members, finals):
            np.testing.assert_array_equal(got, want)

    def test_deep_ensemble_minimal_and_too_small(self, rng):
        assert len(deep_ensemble([rng.normal(size=2)] * 2).members) == 2
        with pytest.raises(DomainError):
            deep_ensemble([rng.normal(size=2)])


class TestSerialization:
    def test_diag_round_trip(self, tmp_path, rng):
        posterior = fit_swag_diag([rng.normal(size=5) for _ in range(4)])
        save_posterior(tmp_path / "p", posterior)
        loaded = load_posterior(tmp_path / "p")
        np.testing.assert_array_equal(loaded.mean, posterior.mean)
        np.testing.assert_array_equal(loaded.variance, posterior.variance)

    def test_lowrank_round_trip(self, tmp_path, rng):
        posterior = fit_swag_lowrank([rng.normal(size=5) for _ in range(4)], jitter=1e-6)
        save_posterior(tmp_path / "p", posterior)
        loaded = load_posterior(tmp_path / "p")
        np.testing.assert_array_equal(loaded.deviations, posterior.deviations)
        assert loaded.jitter == posterior.jitter

    def test_sample_set_round_trip(self, tmp_path, rng):
        original = SampleSet(members=tuple(rng.normal(size=3) for _ in range(4)), provenance="deep-ensemble")
        save_posterior(tmp_path / "p", original)
        loaded = load_posterior(tmp_path / "p")
        assert loaded.provenance == "deep-ensemble"
        for got, want in zip(loaded.members, original.members):
            np.testing.assert_array_equal(got, want)
