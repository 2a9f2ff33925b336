import numpy as np
import pytest
import torch
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from crvae import CRVAE, AugmentationSpec
from crvae.contrastive import ema_update
from crvae.exceptions import ConfigurationError


def make(**kw):
    params = dict(latent_dim=3, batch_size=16, epochs=2, random_state=1)
    params.update(kw)
    return CRVAE(**params)


def states_equal(a, b):
    return all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))


class TestSklearnApi:
    def test_params_round_trip(self):
        est = make(gamma=0.3, temperature=0.2)
        assert est.get_params()["gamma"] == 0.3
        twin = clone(est)
        assert twin.get_params() == est.get_params() and not hasattr(twin, "encoder_")
        assert est.set_params(latent_dim=5) is est and est.latent_dim == 5

    def test_fit_transform_shapes(self, toy_images):
        est = make().fit(toy_images)
        mu = est.transform(toy_images)
        assert mu.shape == (64, 3) and mu.dtype == np.float64
        mu2, logvar = est.posterior(toy_images)
        np.testing.assert_array_equal(mu, mu2)
        assert logvar.shape == (64, 3)
        assert est.inverse_transform(mu).shape == toy_images.shape
        assert est.reconstruct(toy_images[:4]).shape == (4, 1, 28, 28)
        assert np.isfinite(est.score(toy_images))
        np.testing.assert_array_equal(est.fit_transform(toy_images), make().fit(toy_images).transform(toy_images))

    def test_not_fitted(self, toy_images):
        with pytest.raises(NotFittedError):
            make().transform(toy_images)

    def test_transform_is_deterministic(self, toy_images):
        est = make().fit(toy_images)
        np.testing.assert_array_equal(est.transform(toy_images), est.transform(toy_images))
        # Eval mode: one image alone gets the same posterior as within a batch.
        np.testing.assert_allclose(est.transform(toy_images[:1]), est.transform(toy_images)[:1],
                                   rtol=1e-5, atol=1e-6)

    def test_shape_mismatch_after_fit(self, toy_images):
        est = make().fit(toy_images)
        with pytest.raises(ConfigurationError, match="fitted on images of shape"):
            est.transform(np.zeros((2, 1, 32, 32), np.float32))

    @pytest.mark.parametrize("kw, match", [
        ({"batch_size": 1}, "batch_size"),
        ({"gamma": -0.1}, "gamma"),
        ({"ema_momentum": 1.5}, "ema_momentum"),
        ({"ema_cadence": "batch"}, "ema_cadence"),
        ({"likelihood": "laplace"}, "likelihood"),
        ({"optimizer": "rmsprop"}, "optimizer"),
        ({"temperature": 0.0}, "temperature"),
    ])
    def test_bad_params(self, toy_images, kw, match):
        with pytest.raises(ValueError, match=match):
            make(**kw).fit(toy_images)

    def test_partial_fit_counts(self, toy_images):
        est = make()
        est.partial_fit(toy_images).partial_fit(toy_images)
        assert est.n_epochs_ == 2 and est.n_steps_ == 8 and len(est.loss_history_) == 2


class TestTrainingSemantics:
    def test_gamma_zero_matches_plain_vae(self, toy_images):
        cr = make(gamma=0.0, epochs=3).fit(toy_images)
        vae = make(contrastive=False, epochs=3).fit(toy_images)
        assert states_equal(cr.encoder_, vae.encoder_) and states_equal(cr.decoder_, vae.decoder_)
        assert cr.loss_history_ == vae.loss_history_
        assert vae.key_encoder_ is None

    def test_gamma_changes_training(self, toy_images):
        a = make(gamma=0.0).fit(toy_images)
        b = make(gamma=1.0).fit(toy_images)
        assert not states_equal(a.encoder_, b.encoder_)

    def test_seed_reproducible(self, toy_images):
        a, b = make().fit(toy_images), make().fit(toy_images)
        assert states_equal(a.encoder_, b.encoder_) and states_equal(a.key_encoder_, b.key_encoder_)
        c = make(random_state=2).fit(toy_images)
        assert not states_equal(a.encoder_, c.encoder_)

    def test_epoch_cadence_updates_key_once(self, toy_images):
        est = make(epochs=1, ema_momentum=0.9)
        est._initialize(toy_images.shape[1:])
        key_before = {k: v.clone() for k, v in est.key_encoder_.state_dict().items()}
        expected = make(epochs=1, ema_momentum=0.9)
        expected._initialize(toy_images.shape[1:])
        est.partial_fit(toy_images)
        # Apply a single EMA step by hand from the stored start point.
        expected.encoder_.load_state_dict(est.encoder_.state_dict())
        expected.key_encoder_.load_state_dict(key_before)
        ema_update(expected.key_encoder_, expected.encoder_, 0.9)
        for name, p in est.key_encoder_.named_parameters():
            assert torch.equal(p, dict(expected.key_encoder_.named_parameters())[name])

    def test_step_cadence_differs(self, toy_images):
        a = make(ema_momentum=0.9).fit(toy_images)
        b = make(ema_momentum=0.9, ema_cadence="step").fit(toy_images)
        assert not states_equal(a.key_encoder_, b.key_encoder_)

    def test_momentum_one_freezes_key(self, toy_images):
        est = make(ema_momentum=1.0)
        est._initialize(toy_images.shape[1:])
        start = [p.clone() for p in est.key_encoder_.parameters()]
        est.partial_fit(toy_images).partial_fit(toy_images)
        assert all(torch.equal(a, b) for a, b in zip(start, est.key_encoder_.parameters()))

    def test_learning_rate_non_increasing(self, toy_images):
        est = make(plateau_patience=0, plateau_factor=0.5, plateau_threshold=0.5,
                   learning_rate=1e-3)
        lrs = []
        for _ in range(5):
            est.partial_fit(toy_images)
            lrs.append(est.current_lr)
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))
        assert lrs[-1] < 1e-3

    def test_float64_and_adam(self, toy_images):
        est = make(dtype="float64", optimizer="adam").fit(toy_images)
        assert next(est.encoder_.parameters()).dtype == torch.float64
        assert np.all(np.isfinite(est.transform(toy_images)))

    def test_bernoulli_and_identity_augmentation(self, toy_images):
        est = make(likelihood="bernoulli", augmentation=AugmentationSpec.identity()).fit(toy_images)
        assert all(np.isfinite(est.loss_history_))

    def test_rgb_input(self):
        x = np.random.default_rng(0).uniform(size=(32, 3, 32, 32)).astype(np.float32)
        est = make().fit(x)
        assert est.transform(x).shape == (32, 3)
