"""Convolutional encoder/decoder pair and the two ELBO terms."""

import math
from dataclasses import dataclass
from typing import NamedTuple

import torch
from torch import nn

from .exceptions import ConfigurationError

LOGVAR_MIN = -30.0
LOGVAR_MAX = 20.0
BERNOULLI_EPS = 1e-7
KERNEL = 3
STRIDE = 2


class GaussianPosterior(NamedTuple):
    """Diagonal Gaussian q(z|x), one row per image."""

    mu: torch.Tensor
    logvar: torch.Tensor

    @property
    def std(self):
        return torch.exp(0.5 * self.logvar)


def _conv_out(size, padding):
    return (size + 2 * padding - KERNEL) // STRIDE + 1


def _deconv_out(size, padding, output_padding):
    return (size - 1) * STRIDE - 2 * padding + KERNEL + output_padding


@dataclass(frozen=True)
class Architecture:
    """Layer layout of the asymmetric encoder/decoder.

    ``decoder_channels`` lists the output channels of every transposed
    convolution; the last entry is the image channel count.
    """

    in_channels: int
    image_size: int
    latent_dim: int
    encoder_channels: tuple = (32, 64, 128)
    encoder_paddings: tuple = (0, 1, 1)
    decoder_seed: tuple = (32, 2, 2)
    decoder_channels: tuple = (256, 128, 64, 1)
    decoder_paddings: tuple = (1, 1, 1, 0)
    decoder_output_paddings: tuple = (1, 0, 0, 1)

    @classmethod
    def default(cls, in_channels, image_size, latent_dim=16):
        """The reference layout for 28x28 (grey) or 32x32 (colour) images."""
        if image_size == 28:
            paddings, output_paddings = (1, 1, 1, 0), (1, 0, 0, 1)
        elif image_size == 32:
            paddings, output_paddings = (1, 1, 1, 1), (1, 1, 1, 1)
        else:
            raise ConfigurationError(
                f"default architecture supports 28x28 or 32x32 images, got {image_size}"
            )
        return cls(
            in_channels=in_channels,
            image_size=image_size,
            latent_dim=latent_dim,
            decoder_channels=(256, 128, 64, in_channels),
            decoder_paddings=paddings,
            decoder_output_paddings=output_paddings,
        )

    @classmethod
    def toy(cls, latent_dim=2):
        """A few-hundred-parameter 4x4 single-channel model for gradient checks."""
        return cls(
            in_channels=1,
            image_size=4,
            latent_dim=latent_dim,
            encoder_channels=(3, 4),
            encoder_paddings=(1, 1),
            decoder_seed=(3, 1, 1),
            decoder_channels=(4, 1),
            decoder_paddings=(1, 1),
            decoder_output_paddings=(1, 1),
        )

    @property
    def encoder_feature_size(self):
        size = self.image_size
        for p in self.encoder_paddings:
            size = _conv_out(size, p)
        if size < 1:
            raise ConfigurationError(f"image size {self.image_size} too small for encoder")
        return self.encoder_channels[-1] * size * size

    @property
    def decoder_output_size(self):
        size = self.decoder_seed[1]
        for p, op in zip(self.decoder_paddings, self.decoder_output_paddings):
            size = _deconv_out(size, p, op)
        return size

    def validate(self):
        if len(self.encoder_channels) != len(self.encoder_paddings):
            raise ConfigurationError("encoder channels and paddings differ in length")
        n = len(self.decoder_channels)
        if not n == len(self.decoder_paddings) == len(self.decoder_output_paddings):
            raise ConfigurationError("decoder channel/padding lists differ in length")
        if self.decoder_channels[-1] != self.in_channels:
            raise ConfigurationError("last decoder layer must emit the image channels")
        if self.decoder_seed[1] != self.decoder_seed[2]:
            raise ConfigurationError("decoder seed must be square")
        if self.decoder_output_size != self.image_size:
            raise ConfigurationError(
                f"decoder produces {self.decoder_output_size}px images, "
                f"expected {self.image_size}px"
            )
        if self.latent_dim < 1:
            raise ConfigurationError("latent_dim must be >= 1")
        _ = self.encoder_feature_size  # raises on undersized input
        return self


class Encoder(nn.Module):
    """Three strided conv blocks and a linear pair emitting (mu, logvar)."""

    def __init__(self, arch):
        super().__init__()
        self.arch = arch.validate()
        layers = []
        c_in = arch.in_channels
        for c_out, pad in zip(arch.encoder_channels, arch.encoder_paddings):
            layers += [
                nn.Conv2d(c_in, c_out, KERNEL, STRIDE, pad),
                nn.BatchNorm2d(c_out),
                nn.ReLU(),
            ]
            c_in = c_out
        self.features = nn.Sequential(*layers, nn.Flatten())
        self.fc_mu = nn.Linear(arch.encoder_feature_size, arch.latent_dim)
        self.fc_logvar = nn.Linear(arch.encoder_feature_size, arch.latent_dim)

    def forward(self, x):
        h = self.features(x)
        logvar = self.fc_logvar(h).clamp(LOGVAR_MIN, LOGVAR_MAX)
        return GaussianPosterior(self.fc_mu(h), logvar)


class Decoder(nn.Module):
    """Linear projection to a small seed map, then transposed-conv upsampling."""

    def __init__(self, arch):
        super().__init__()
        self.arch = arch.validate()
        seed = arch.decoder_seed
        self.project = nn.Linear(arch.latent_dim, math.prod(seed))
        layers = [nn.Unflatten(1, tuple(seed))]
        c_in = seed[0]
        n = len(arch.decoder_channels)
        for i, (c_out, pad, out_pad) in enumerate(
            zip(arch.decoder_channels, arch.decoder_paddings, arch.decoder_output_paddings)
        ):
            layers += [
                nn.ConvTranspose2d(c_in, c_out, KERNEL, STRIDE, pad, out_pad),
                nn.BatchNorm2d(c_out),
                nn.Sigmoid() if i == n - 1 else nn.ReLU(),
            ]
            c_in = c_out
        self.upsample = nn.Sequential(*layers)

    def forward(self, z):
        return self.upsample(self.project(z))


@torch.no_grad()
def init_parameters(module, generator):
    """Uniform fan-in initialisation, bounds +-1/sqrt(fan_in), in a fixed order."""
    for layer in module.modules():
        if isinstance(layer, nn.Linear):
            fan_in = layer.in_features
        elif isinstance(layer, (nn.Conv2d, nn.ConvTranspose2d)):
            fan_in = layer.in_channels * KERNEL * KERNEL
        elif isinstance(layer, nn.BatchNorm2d):
            layer.reset_parameters()
            continue
        else:
            continue
        bound = 1.0 / math.sqrt(fan_in)
        layer.weight.uniform_(-bound, bound, generator=generator)
        layer.bias.uniform_(-bound, bound, generator=generator)
    return module


def build_model(arch, generator=None, dtype=torch.float32):
    """Return an initialised ``(encoder, decoder)`` pair for ``arch``."""
    if generator is None:
        generator = torch.Generator().manual_seed(0)
    encoder = init_parameters(Encoder(arch), generator).to(dtype)
    decoder = init_parameters(Decoder(arch), generator).to(dtype)
    return encoder, decoder


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())


def _set_mode(module, mode):
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    module.train(mode == "train")


def encode(encoder, x, mode="eval"):
    """Posterior q(z|x). ``mode`` selects batch ("train") or running ("eval") statistics."""
    arch = encoder.arch
    expected = (arch.in_channels, arch.image_size, arch.image_size)
    if x.ndim != 4 or tuple(x.shape[1:]) != expected:
        raise ConfigurationError(
            f"encoder expects images of shape [K, {expected[0]}, {expected[1]}, "
            f"{expected[2]}], got {list(x.shape)}"
        )
    _set_mode(encoder, mode)
    return encoder(x)


def reparameterize(posterior, eps):
    """z = mu + sigma * eps, with ``eps`` supplied by the caller."""
    mu, logvar = posterior
    if eps.shape != mu.shape or logvar.shape != mu.shape:
        raise ValueError(
            f"shape mismatch: mu {list(mu.shape)}, logvar {list(logvar.shape)}, "
            f"eps {list(eps.shape)}"
        )
    return mu + torch.exp(0.5 * logvar) * eps


def decode(decoder, z, mode="eval"):
    d = decoder.arch.latent_dim
    if z.ndim != 2 or z.shape[1] != d:
        raise ConfigurationError(f"decoder expects latents [K, {d}], got {list(z.shape)}")
    _set_mode(decoder, mode)
    return decoder(z)


def recon_loss_per_image(x, xhat, kind="gaussian"):
    """Summed reconstruction error of every image in the batch.

    ``gaussian`` is the squared error with the Gaussian constant and the
    1/(2 sigma^2) factor dropped; ``bernoulli`` is binary cross entropy.
    """
    if x.shape != xhat.shape:
        raise ValueError(f"shape mismatch: x {list(x.shape)} vs xhat {list(xhat.shape)}")
    if torch.isnan(x).any() or torch.isnan(xhat).any():
        raise ValueError("NaN in reconstruction loss inputs")
    dims = tuple(range(1, x.ndim))
    if kind == "gaussian":
        return ((x - xhat) ** 2).sum(dim=dims)
    if kind == "bernoulli":
        p = xhat.clamp(BERNOULLI_EPS, 1.0 - BERNOULLI_EPS)
        return -(x * torch.log(p) + (1.0 - x) * torch.log1p(-p)).sum(dim=dims)
    raise ValueError(f"unknown likelihood kind {kind!r}")


def recon_loss(x, xhat, kind="gaussian"):
    return recon_loss_per_image(x, xhat, kind).mean()


def kl_per_sample(posterior):
    mu, logvar = posterior
    return 0.5 * (mu.pow(2) + logvar.exp() - 1.0 - logvar).sum(dim=1)


def kl_to_prior(posterior):
    """Closed-form KL(q(z|x) || N(0, I)) in nats, averaged over the batch."""
    return kl_per_sample(posterior).mean()


def vae_loss(x, xhat, posterior, kind="gaussian"):
    """Negative ELBO: reconstruction error plus KL to the prior."""
    return recon_loss(x, xhat, kind) + kl_to_prior(posterior)
