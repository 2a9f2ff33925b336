"""scikit-learn style estimator wrapping the contrastive-regularized VAE."""

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_images, check_positive
from .contrastive import cr_vae_losses, ema_update, make_key_encoder
from .data import AugmentationSpec, augment, iterate_batches
from .exceptions import ConfigurationError, TrainingDivergedError
from .model import Architecture, build_model, decode, encode

# The key-view stream is seeded from the run seed by this fixed offset so that
# query-side draws never depend on whether a key view is produced.
KEY_STREAM_OFFSET = 0x5EED
_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class CRVAE(TransformerMixin, BaseEstimator):
    """Variational autoencoder with an optional momentum-contrast InfoNCE regularizer.

    Minimises ``L_VAE + gamma * L_InfoNCE`` where the InfoNCE term contrasts
    sampled latents of two augmented views, the key view being encoded by an
    exponential-moving-average copy of the encoder. ``contrastive=False``
    drops the key encoder entirely and trains a plain VAE.

    ``transform`` returns posterior means; ``inverse_transform`` decodes
    latents back to images.

    Parameters
    ----------
    latent_dim : int, default=16
    gamma : float, default=1.0
        Weight of the InfoNCE term.
    contrastive : bool, default=True
        Build the key encoder and compute InfoNCE. With ``False`` the
        objective is the plain VAE loss regardless of ``gamma``.
    likelihood : {"gaussian", "bernoulli"}
    batch_size : int, default=256
    epochs : int, default=50
    learning_rate, momentum, weight_decay : float
        SGD settings (momentum is ignored by ``optimizer="adam"``).
    optimizer : {"sgd", "adam"}
    plateau_patience, plateau_factor, plateau_threshold
        Multiply the learning rate by ``plateau_factor`` once the epoch loss
        has not improved (relative threshold) for ``plateau_patience`` epochs.
    temperature : float, default=1.0
        Divides the cosine similarities inside InfoNCE.
    ema_momentum : float, default=0.999
    ema_cadence : {"epoch", "step"}
        Update the key encoder after every epoch or after every step.
    augmentation : AugmentationSpec or None
        ``None`` uses the default spec.
    architecture : Architecture or None
        ``None`` picks the default layout from the input shape.
    dtype : {"float32", "float64"}
    random_state : int
        Seeds initialisation, shuffling, augmentation and sampling noise.
    """

    def __init__(self, latent_dim=16, gamma=1.0, contrastive=True, likelihood="gaussian",
                 batch_size=256, epochs=50, learning_rate=1e-3, momentum=0.9,
                 weight_decay=1e-8, optimizer="sgd", plateau_patience=20,
                 plateau_factor=0.9, plateau_threshold=1e-4, temperature=1.0,
                 ema_momentum=0.999, ema_cadence="epoch", augmentation=None,
                 architecture=None, dtype="float32", random_state=0):
        self.latent_dim = latent_dim
        self.gamma = gamma
        self.contrastive = contrastive
        self.likelihood = likelihood
        self.batch_size = batch_size
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.optimizer = optimizer
        self.plateau_patience = plateau_patience
        self.plateau_factor = plateau_factor
        self.plateau_threshold = plateau_threshold
        self.temperature = temperature
        self.ema_momentum = ema_momentum
        self.ema_cadence = ema_cadence
        self.augmentation = augmentation
        self.architecture = architecture
        self.dtype = dtype
        self.random_state = random_state

    # -- setup ---------------------------------------------------------------

    def _check_params(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (InfoNCE needs negatives)")
        check_positive(self.gamma, "gamma", strict=False)
        for name in ("learning_rate", "temperature", "plateau_factor"):
            check_positive(getattr(self, name), name)
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ValueError("ema_momentum must lie in [0, 1]")
        if self.ema_cadence not in ("epoch", "step"):
            raise ValueError("ema_cadence must be 'epoch' or 'step'")
        if self.likelihood not in ("gaussian", "bernoulli"):
            raise ValueError("likelihood must be 'gaussian' or 'bernoulli'")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")

    def _resolve_architecture(self, input_shape):
        c, h, w = input_shape
        if h != w:
            raise ConfigurationError(f"square images required, got {h}x{w}")
        arch = self.architecture or Architecture.default(c, h, self.latent_dim)
        if (arch.in_channels, arch.image_size, arch.image_size) != tuple(input_shape):
            raise ConfigurationError(
                f"architecture expects {arch.in_channels}x{arch.image_size}x{arch.image_size} "
                f"images, data has {c}x{h}x{w}"
            )
        if arch.latent_dim != self.latent_dim:
            raise ConfigurationError(
                f"architecture latent_dim {arch.latent_dim} != latent_dim {self.latent_dim}"
            )
        return arch.validate()

    @property
    def _torch_dtype(self):
        return _DTYPES[self.dtype]

    def _initialize(self, input_shape):
        self._check_params()
        self.input_shape_ = tuple(int(s) for s in input_shape)
        self.architecture_ = self._resolve_architecture(self.input_shape_)
        self.augmentation_ = self.augmentation or AugmentationSpec()
        self.generator_ = torch.Generator().manual_seed(int(self.random_state))
        self.key_generator_ = torch.Generator().manual_seed(
            int(self.random_state) + KEY_STREAM_OFFSET
        )
        self.encoder_, self.decoder_ = build_model(
            self.architecture_, self.generator_, self._torch_dtype
        )
        self.key_encoder_ = make_key_encoder(self.encoder_) if self.contrastive else None
        params = list(self.encoder_.parameters()) + list(self.decoder_.parameters())
        if self.optimizer == "sgd":
            self.optimizer_ = torch.optim.SGD(params, lr=self.learning_rate,
                                              momentum=self.momentum,
                                              weight_decay=self.weight_decay)
        else:
            self.optimizer_ = torch.optim.Adam(params, lr=self.learning_rate,
                                               weight_decay=self.weight_decay)
        self.scheduler_ = torch.optim.lr_scheduler.ReduceLROnPlateau(
            self.optimizer_, mode="min", factor=self.plateau_factor,
            patience=self.plateau_patience, threshold=self.plateau_threshold,
            threshold_mode="rel",
        )
        self.n_epochs_ = 0
        self.n_steps_ = 0
        self.loss_history_ = []
        self.step_log_ = []

    def _as_tensor(self, X):
        X = check_images(X)
        if hasattr(self, "input_shape_") and X.shape[1:] != self.input_shape_:
            raise ConfigurationError(
                f"model was fitted on images of shape {self.input_shape_}, got {X.shape[1:]}"
            )
        return torch.from_numpy(X).to(self._torch_dtype)

    # -- training ------------------------------------------------------------

    @property
    def current_lr(self):
        return float(self.optimizer_.param_groups[0]["lr"])

    def fit(self, X, y=None):
        """Train from scratch for ``epochs`` epochs."""
        X = check_images(X)
        self._initialize(X.shape[1:])
        for _ in range(self.epochs):
            self.partial_fit(X)
        return self

    def partial_fit(self, X, y=None):
        """Run one epoch, initialising on first use."""
        if not hasattr(self, "encoder_"):
            self._initialize(check_images(X).shape[1:])
        data = self._as_tensor(X)
        spec = self.augmentation_
        d = self.latent_dim
        total, count = 0.0, 0
        for idx in iterate_batches(len(data), self.batch_size, self.generator_):
            xb = data[idx]
            xq = augment(xb, spec, self.generator_)
            eps_q = torch.randn(len(idx), d, generator=self.generator_, dtype=self._torch_dtype)
            key_args = {}
            if self.contrastive:
                key_args = dict(
                    key_encoder=self.key_encoder_,
                    xk=augment(xb, spec, self.key_generator_),
                    eps_k=torch.randn(len(idx), d, generator=self.key_generator_,
                                      dtype=self._torch_dtype),
                )
            losses = cr_vae_losses(
                self.encoder_, self.decoder_, xq, eps_q, gamma=self.gamma,
                kind=self.likelihood, temperature=self.temperature, **key_args,
            )
            if not torch.isfinite(losses.total):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {self.n_epochs_}, step {self.n_steps_}",
                    epoch=self.n_epochs_,
                )
            self.optimizer_.zero_grad(set_to_none=True)
            losses.total.backward()
            self.optimizer_.step()
            if self.contrastive and self.ema_cadence == "step":
                ema_update(self.key_encoder_, self.encoder_, self.ema_momentum)
            self.n_steps_ += 1
            nce = float("nan") if losses.nce is None else losses.nce.item()
            self.step_log_.append((losses.vae.item(), nce))
            total += losses.total.item() * len(idx)
            count += len(idx)
        epoch_loss = total / max(count, 1)
        self.scheduler_.step(epoch_loss)
        if self.contrastive and self.ema_cadence == "epoch":
            ema_update(self.key_encoder_, self.encoder_, self.ema_momentum)
        self.loss_history_.append(epoch_loss)
        self.n_epochs_ += 1
        return self

    # -- inference -----------------------------------------------------------

    @torch.no_grad()
    def posterior(self, X, batch_size=1000):
        """Posterior ``(mu, logvar)`` as float64 arrays, eval-mode statistics."""
        check_is_fitted(self, "encoder_")
        data = self._as_tensor(X)
        mus, logvars = [], []
        for start in range(0, len(data), batch_size):
            post = encode(self.encoder_, data[start:start + batch_size], "eval")
            mus.append(post.mu.double().numpy())
            logvars.append(post.logvar.double().numpy())
        return np.concatenate(mus), np.concatenate(logvars)

    def transform(self, X):
        """Posterior means ``mu(x)``."""
        return self.posterior(X)[0]

    @torch.no_grad()
    def inverse_transform(self, Z, batch_size=1000):
        check_is_fitted(self, "decoder_")
        Z = torch.as_tensor(np.asarray(Z), dtype=self._torch_dtype)
        parts = [decode(self.decoder_, Z[s:s + batch_size], "eval").numpy()
                 for s in range(0, len(Z), batch_size)]
        return np.concatenate(parts)

    def reconstruct(self, X):
        """Decode the posterior mean of each image."""
        return self.inverse_transform(self.transform(X))

    def score(self, X, y=None):
        """Negative evaluation loss (NLL + KL) per image; higher is better."""
        from .metrics import eval_kl, eval_nll

        return -(eval_nll(self, X) + eval_kl(self, X))
