"""Posterior-collapse diagnostics: NLL, KL, marginal KL, mutual information, active units.

Metric functions take a fitted model exposing ``posterior(X)`` and
``reconstruct(X)`` (see :class:`crvae.CRVAE`) together with an image array.
Everything is computed in float64 with numpy's pairwise summation so that a
fixed (model, data, seed) triple always yields the same numbers.
"""

import csv
import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch
from scipy.special import logsumexp

from ._validation import check_images, check_latents
from .model import recon_loss_per_image

LOG_2PI = math.log(2.0 * math.pi)
METRIC_COLUMNS = (
    "epoch", "split", "nll", "kl", "marginal_kl", "mi_nats", "mi_bits", "au", "lr", "gamma", "seed",
)
DEFAULT_MAX_PAIRS = 1 << 24


class Estimate(NamedTuple):
    value: float
    stderr: float


class Information(NamedTuple):
    nats: float
    bits: float


@dataclass
class MetricRecord:
    epoch: int
    split: str
    nll: float
    kl: float
    marginal_kl: float
    marginal_kl_se: float
    mi_nats: float
    mi_bits: float
    au: int
    lr: float = float("nan")
    gamma: float = float("nan")
    seed: int = -1

    def csv_row(self):
        return [_fmt(getattr(self, c)) for c in METRIC_COLUMNS]

    def to_dict(self):
        return asdict(self)


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _check_nonempty(X):
    if len(X) == 0:
        raise ValueError("cannot evaluate on an empty dataset")


def gaussian_kl(mu, logvar):
    """Per-row closed-form KL(N(mu, diag exp(logvar)) || N(0, I))."""
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    return 0.5 * np.sum(mu**2 + np.exp(logvar) - 1.0 - logvar, axis=1)


def eval_nll(model, X, kind=None, batch_size=500):
    """Dataset mean of the per-image reconstruction error of decode(mu)."""
    _check_nonempty(X)
    X = check_images(X)
    kind = kind or model.likelihood
    totals = []
    for start in range(0, len(X), batch_size):
        xb = X[start:start + batch_size]
        xhat = model.reconstruct(xb)
        per_image = recon_loss_per_image(
            torch.from_numpy(xb).double(), torch.from_numpy(xhat).double(), kind
        )
        totals.append(per_image.numpy())
    return float(np.concatenate(totals).mean())


def eval_kl(model, X):
    """Dataset mean of the closed-form KL to the standard normal prior."""
    _check_nonempty(X)
    mu, logvar = model.posterior(X)
    return float(gaussian_kl(mu, logvar).mean())


def _log_normal(z, mu, logvar):
    """log N(z; mu, diag exp(logvar)) for z [S, d] against components [M, d] -> [S, M]."""
    inv_var = np.exp(-logvar)
    quad = (z**2) @ inv_var.T - 2.0 * z @ (mu * inv_var).T + np.sum(mu**2 * inv_var, axis=1)
    return -0.5 * (quad + np.sum(logvar, axis=1) + mu.shape[1] * LOG_2PI)


def aggregate_posterior_kl(mu, logvar, num_samples=4096, max_mixture=2048, rng=None,
                           max_pairs=DEFAULT_MAX_PAIRS, chunk=512):
    """Monte-Carlo KL(q_avg || N(0, I)) for the uniform mixture of diagonal Gaussians.

    Components are the given posteriors (a random subset of ``max_mixture``
    when there are more). Samples are drawn ancestrally: pick a component,
    then sample from it. Returns the mean of ``log q_avg(z) - log p(z)`` and
    its standard error.
    """
    mu = check_latents(mu, name="mu")
    logvar = check_latents(logvar, name="logvar")
    if mu.shape != logvar.shape:
        raise ValueError("mu and logvar shapes differ")
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    rng = np.random.default_rng(rng)
    m = min(len(mu), max_mixture)
    if num_samples * m > max_pairs:
        raise ValueError(
            f"{num_samples} samples x {m} mixture components exceeds the compute budget "
            f"of {max_pairs} density evaluations; use a smaller max_mixture"
        )
    if m < len(mu):
        keep = np.sort(rng.choice(len(mu), size=m, replace=False))
        mu, logvar = mu[keep], logvar[keep]
    d = mu.shape[1]
    component = rng.integers(0, m, size=num_samples)
    eps = rng.standard_normal((num_samples, d))
    z = mu[component] + np.exp(0.5 * logvar[component]) * eps
    log_ratio = np.empty(num_samples)
    for start in range(0, num_samples, chunk):
        zc = z[start:start + chunk]
        log_q = logsumexp(_log_normal(zc, mu, logvar), axis=1) - math.log(m)
        log_p = -0.5 * (np.sum(zc**2, axis=1) + d * LOG_2PI)
        log_ratio[start:start + chunk] = log_q - log_p
    stderr = log_ratio.std(ddof=1) / math.sqrt(num_samples) if num_samples > 1 else float("nan")
    return Estimate(float(log_ratio.mean()), float(stderr))


def marginal_kl(model, X, num_samples=4096, max_mixture=2048, rng=None,
                max_pairs=DEFAULT_MAX_PAIRS):
    _check_nonempty(X)
    mu, logvar = model.posterior(X)
    return aggregate_posterior_kl(mu, logvar, num_samples, max_mixture, rng, max_pairs)


def mutual_info(kl, marginal_kl):
    """I(x; z) = KL - marginal KL, in nats and bits. Not clamped at zero."""
    nats = float(kl) - float(marginal_kl)
    return Information(nats, nats / math.log(2.0))


def count_active_units(mu, threshold=0.01):
    """Number of latent coordinates whose posterior mean varies across inputs above ``threshold``."""
    mu = check_latents(mu, name="mu")
    return int(np.sum(mu.var(axis=0) > threshold))


def active_units(model, X, threshold=0.01):
    _check_nonempty(X)
    return count_active_units(model.transform(X), threshold)


def evaluate(model, X, *, epoch=0, split="heldout", seed=0, rng=None, num_samples=4096,
             max_mixture=2048, threshold=0.01, lr=float("nan"), gamma=float("nan")):
    """One :class:`MetricRecord` snapshot of ``model`` on ``X``.

    ``rng`` seeds the marginal-KL sampler (``seed`` when omitted); ``seed``,
    ``lr`` and ``gamma`` are recorded as tags.
    """
    _check_nonempty(X)
    mu, logvar = model.posterior(X)
    kl = float(gaussian_kl(mu, logvar).mean())
    mkl = aggregate_posterior_kl(mu, logvar, num_samples, max_mixture,
                                 rng=seed if rng is None else rng)
    mi = mutual_info(kl, mkl.value)
    return MetricRecord(
        epoch=epoch,
        split=split,
        nll=eval_nll(model, X),
        kl=kl,
        marginal_kl=mkl.value,
        marginal_kl_se=mkl.stderr,
        mi_nats=mi.nats,
        mi_bits=mi.bits,
        au=count_active_units(mu, threshold),
        lr=float(lr),
        gamma=float(gamma),
        seed=int(seed),
    )


def export_latents(model, X, labels, path):
    """Write posterior means as CSV: ``index,label,mu_0..mu_{d-1}``."""
    mu = model.transform(X)
    labels = np.asarray(labels)
    if labels.shape != (mu.shape[0],):
        raise ValueError(f"{mu.shape[0]} latents but {labels.shape} labels")
    header = ["index", "label"] + [f"mu_{j}" for j in range(mu.shape[1])]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for i, (label, row) in enumerate(zip(labels, mu)):
            writer.writerow([i, int(label)] + [f"{v:.9g}" for v in row])
    return path


def read_latents(path):
    """Inverse of :func:`export_latents`: ``(index, labels, mu)`` arrays."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header[:2] != ["index", "label"] or not all(h.startswith("mu_") for h in header[2:]):
            raise ValueError(f"{path}: not a latent CSV (header {header[:3]}...)")
        rows = [r for r in reader if r]
    if not rows:
        raise ValueError(f"{path}: no latent rows")
    table = np.array(rows, dtype=np.float64)
    return table[:, 0].astype(np.int64), table[:, 1].astype(np.int64), table[:, 2:]
