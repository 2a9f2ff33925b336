import math

import numpy as np
import pytest

from crvae.metrics import (
    METRIC_COLUMNS,
    MetricRecord,
    aggregate_posterior_kl,
    count_active_units,
    eval_kl,
    eval_nll,
    evaluate,
    export_latents,
    gaussian_kl,
    marginal_kl,
    mutual_info,
    read_latents,
)

import oracles


class StubModel:
    """Fixed posteriors and reconstructions, keyed by row order."""

    likelihood = "gaussian"

    def __init__(self, mu, logvar, recon=None):
        self.mu = np.asarray(mu, dtype=np.float64)
        self.logvar = np.asarray(logvar, dtype=np.float64)
        self.recon = recon

    def posterior(self, X):
        n = len(X)
        return self.mu[:n], self.logvar[:n]

    def transform(self, X):
        return self.posterior(X)[0]

    def reconstruct(self, X):
        return self.recon(np.asarray(X)) if self.recon else np.asarray(X)


class TestNLL:
    def test_perfect_autoencoder(self, toy_images):
        model = StubModel(np.zeros((64, 2)), np.zeros((64, 2)))
        assert eval_nll(model, toy_images) == 0.0

    def test_constant_half_on_binary(self):
        x = (np.random.default_rng(0).uniform(size=(10, 1, 28, 28)) > 0.5).astype(np.float32)
        model = StubModel(np.zeros((10, 2)), np.zeros((10, 2)),
                          recon=lambda X: np.full_like(X, 0.5))
        assert eval_nll(model, x) == pytest.approx(0.25 * 784)

    def test_streaming_equals_single_pass(self, toy_images):
        model = StubModel(np.zeros((64, 2)), np.zeros((64, 2)), recon=np.sqrt)
        streamed = eval_nll(model, toy_images, batch_size=10)
        x = toy_images.astype(np.float64)
        direct = np.mean(np.sum((x - np.sqrt(x)) ** 2, axis=(1, 2, 3)))
        assert streamed == pytest.approx(direct, rel=1e-6)

    def test_empty(self):
        with pytest.raises(ValueError, match="empty"):
            eval_nll(StubModel(np.zeros((1, 1)), np.zeros((1, 1))), np.zeros((0, 1, 2, 2)))


class TestKL:
    def test_collapsed_is_zero(self):
        model = StubModel(np.zeros((5, 3)), np.zeros((5, 3)))
        assert eval_kl(model, np.zeros((5, 1, 2, 2))) == 0.0

    def test_single_sample(self):
        assert gaussian_kl([[1.0]], [[0.0]])[0] == 0.5

    def test_against_monte_carlo(self, rng):
        for _ in range(5):
            d = rng.integers(1, 9)
            mu, logvar = rng.normal(size=d), rng.uniform(-2, 1, size=d)
            est, se = oracles.mc_kl_to_standard_normal(mu, logvar, 100_000, rng)
            assert abs(gaussian_kl(mu[None], logvar[None])[0] - est) < 3 * se

    def test_nonnegative(self, rng):
        assert np.all(gaussian_kl(rng.normal(size=(100, 4)) * 3, rng.normal(size=(100, 4)) * 3) >= 0)


class TestMarginalKL:
    def test_prior_posteriors_give_zero(self):
        est = aggregate_posterior_kl(np.zeros((50, 3)), np.zeros((50, 3)), 2000, rng=0)
        assert abs(est.value) <= 3 * est.stderr + 1e-12

    def test_single_datum_equals_its_kl(self):
        mu, logvar = np.array([[0.7, -1.2]]), np.array([[-0.5, 0.3]])
        est = aggregate_posterior_kl(mu, logvar, 20000, rng=1)
        assert abs(est.value - gaussian_kl(mu, logvar)[0]) < 3 * est.stderr + 1e-9
        assert mutual_info(gaussian_kl(mu, logvar)[0], est.value).nats == pytest.approx(
            gaussian_kl(mu, logvar)[0] - est.value)

    def test_two_component_mixture_oracle(self):
        mu = np.array([[-2.0], [2.0]])
        logvar = np.zeros((2, 1))
        est = aggregate_posterior_kl(mu, logvar, 200_000, rng=3)
        ref, ref_se = oracles.mixture_kl_1d([-2.0, 2.0], 1.0, 1_000_000, np.random.default_rng(4))
        assert abs(est.value - ref) < 3 * math.hypot(est.stderr, ref_se)

    def test_budget(self):
        with pytest.raises(ValueError, match="smaller max_mixture"):
            aggregate_posterior_kl(np.zeros((100, 2)), np.zeros((100, 2)), 1000, max_pairs=10_000)

    def test_subsampled_mixture(self, rng):
        mu = rng.normal(size=(300, 2))
        est = aggregate_posterior_kl(mu, np.full((300, 2), -1.0), 500, max_mixture=100, rng=0)
        assert np.isfinite(est.value) and est.value >= -3 * est.stderr

    def test_deterministic(self, rng):
        mu, lv = rng.normal(size=(40, 3)), rng.normal(size=(40, 3)) * 0.2
        assert aggregate_posterior_kl(mu, lv, 300, rng=5) == aggregate_posterior_kl(mu, lv, 300, rng=5)

    def test_model_wrapper(self):
        model = StubModel(np.zeros((10, 2)), np.zeros((10, 2)))
        assert marginal_kl(model, np.zeros((10, 1, 2, 2)), 100, rng=0).value == pytest.approx(0.0)


class TestMutualInfo:
    def test_table_example(self):
        mi = mutual_info(16.99, 12.30)
        assert mi.nats == pytest.approx(4.69)
        assert mi.bits == pytest.approx(4.69 / math.log(2))

    def test_not_clamped(self):
        assert mutual_info(1.0, 1.2).nats == pytest.approx(-0.2)


class TestActiveUnits:
    def test_constant_mu(self):
        assert count_active_units(np.ones((20, 5))) == 0

    def test_one_informative_coordinate(self, rng):
        stat = rng.normal(size=200) * 2.0
        mu = np.zeros((200, 4))
        mu[:, 2] = stat
        assert count_active_units(mu) == 1

    def test_threshold_monotone(self, rng):
        mu = rng.normal(size=(100, 8)) * np.linspace(0.01, 1, 8)
        counts = [count_active_units(mu, t) for t in (0.0, 1e-4, 1e-2, 0.1, 1.0)]
        assert counts == sorted(counts, reverse=True)


class TestRecord:
    def test_evaluate_identities(self, rng):
        mu, lv = rng.normal(size=(60, 3)), rng.normal(size=(60, 3)) * 0.3 - 1
        model = StubModel(mu, lv)
        X = rng.uniform(size=(60, 1, 4, 4)).astype(np.float32)
        rec = evaluate(model, X, epoch=3, seed=7, num_samples=500, lr=1e-3, gamma=1.0)
        assert rec.mi_nats == rec.kl - rec.marginal_kl
        assert rec.mi_bits == pytest.approx(rec.mi_nats / math.log(2))
        assert rec.kl >= 0 and 0 <= rec.au <= 3
        assert rec.nll == 0.0
        assert rec.marginal_kl >= -3 * rec.marginal_kl_se
        # mi cannot exceed kl by more than the estimator band.
        assert rec.mi_nats <= rec.kl + 3 * rec.marginal_kl_se

    def test_datum_independent_posterior(self):
        model = StubModel(np.tile([[0.3, -0.4]], (80, 1)), np.tile([[-0.2, 0.1]], (80, 1)))
        rec = evaluate(model, np.zeros((80, 1, 2, 2)), num_samples=4000)
        assert abs(rec.mi_nats) < 3 * rec.marginal_kl_se + 1e-9
        assert rec.au == 0

    def test_csv_row_schema(self):
        rec = MetricRecord(1, "heldout", 1.5, 2.0, 0.5, 0.01, 1.5, 2.1640425613334453, 4, 0.001, 1.0, 0)
        assert len(rec.csv_row()) == len(METRIC_COLUMNS)
        assert rec.csv_row()[:3] == ["1", "heldout", "1.5"]


class TestLatentExport:
    def test_schema_and_round_trip(self, tmp_path, rng):
        mu = rng.normal(size=(1000, 16))
        model = StubModel(mu, np.zeros_like(mu))
        labels = rng.integers(0, 10, size=1000)
        path = tmp_path / "lat.csv"
        export_latents(model, np.zeros((1000, 1, 2, 2)), labels, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "index,label," + ",".join(f"mu_{j}" for j in range(16))
        assert len(lines) == 1001 and all(len(line.split(",")) == 18 for line in lines)
        index, lab, back = read_latents(path)
        np.testing.assert_array_equal(index, np.arange(1000))
        np.testing.assert_array_equal(lab, labels)
        np.testing.assert_allclose(back, mu, rtol=1e-8)
        first = path.read_bytes()
        export_latents(model, np.zeros((1000, 1, 2, 2)), labels, path)
        assert path.read_bytes() == first

    def test_label_count_mismatch(self, tmp_path):
        model = StubModel(np.zeros((3, 2)), np.zeros((3, 2)))
        with pytest.raises(ValueError):
            export_latents(model, np.zeros((3, 1, 2, 2)), [0, 1], tmp_path / "x.csv")

    def test_unwritable(self, tmp_path):
        model = StubModel(np.zeros((3, 2)), np.zeros((3, 2)))
        with pytest.raises(OSError):
            export_latents(model, np.zeros((3, 1, 2, 2)), [0, 1, 2], tmp_path / "no" / "x.csv")

    def test_not_a_latent_file(self, tmp_path):
        (tmp_path / "m.csv").write_text("epoch,split\n1,heldout\n")
        with pytest.raises(ValueError, match="not a latent CSV"):
            read_latents(tmp_path / "m.csv")


def test_real_model_metrics_are_deterministic(toy_images):
    from crvae import CRVAE

    model = CRVAE(latent_dim=4, epochs=1, batch_size=32, random_state=0).fit(toy_images)
    a = evaluate(model, toy_images, num_samples=256)
    b = evaluate(model, toy_images, num_samples=256)
    assert a.csv_row() == b.csv_row()
    mu, _ = model.posterior(toy_images)
    assert np.array_equal(mu, model.transform(toy_images))
