"""InfoNCE over query/key latents, the momentum key encoder, and the joint loss."""

import copy
import math
from typing import NamedTuple

import torch
import torch.nn.functional as F

from .model import decode, encode, kl_to_prior, recon_loss, reparameterize

NORM_FLOOR = 1e-12


class MIBound(NamedTuple):
    nats: float
    bits: float


class CRLosses(NamedTuple):
    total: torch.Tensor
    vae: torch.Tensor
    recon: torch.Tensor
    kl: torch.Tensor
    nce: torch.Tensor | None


def _unit_rows(z):
    return z / z.norm(dim=-1, keepdim=True).clamp_min(NORM_FLOOR)


def cosine_sim(a, b):
    """Cosine similarity along the last axis; zero vectors give 0, never NaN."""
    a, b = (t if torch.is_tensor(t) else torch.tensor(t, dtype=torch.float64) for t in (a, b))
    return (_unit_rows(a) * _unit_rows(b)).sum(dim=-1)


def similarity_matrix(zq, zk):
    """All-pairs cosine similarities ``s[i, k] = cos(zq_i, zk_k)``."""
    return _unit_rows(zq) @ _unit_rows(zk).T


def info_nce(zq, zk, temperature=1.0):
    """Mean softmax cross entropy picking row i of ``zk`` as the positive for row i of ``zq``.

    Other rows of ``zk`` act as negatives. ``zk`` is detached: keys come from
    the momentum encoder and receive no gradient.
    """
    if zq.ndim != 2 or zq.shape != zk.shape:
        raise ValueError(f"query/key shapes differ: {list(zq.shape)} vs {list(zk.shape)}")
    if zq.shape[0] < 2:
        raise ValueError("info_nce needs a batch of at least 2 (no negatives otherwise)")
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    logits = similarity_matrix(zq, zk.detach()) / temperature
    targets = torch.arange(zq.shape[0], device=zq.device)
    return F.cross_entropy(logits, targets)


def mi_lower_bound(nce_loss, batch_size):
    """log K - L_InfoNCE, in nats and bits."""
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2")
    nats = math.log(batch_size) - float(nce_loss)
    return MIBound(nats, nats / math.log(2.0))


def make_key_encoder(query):
    """A gradient-free copy of the query encoder."""
    key = copy.deepcopy(query)
    for p in key.parameters():
        p.requires_grad_(False)
    return key


@torch.no_grad()
def ema_update(key, query, momentum):
    """In place: key <- m * key + (1 - m) * query, for every parameter."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {momentum}")
    key_params = dict(key.named_parameters())
    query_params = dict(query.named_parameters())
    if key_params.keys() != query_params.keys():
        raise ValueError("key and query encoders have different parameter sets")
    for name, k in key_params.items():
        q = query_params[name]
        if k.shape != q.shape:
            raise ValueError(f"shape mismatch for {name}: {list(k.shape)} vs {list(q.shape)}")
        k.mul_(momentum).add_(q.detach(), alpha=1.0 - momentum)
    return key


def cr_loss(vae, nce, gamma):
    """L_CR = L_VAE + gamma * L_InfoNCE."""
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    return vae + gamma * nce


def cr_vae_losses(
    encoder,
    decoder,
    xq,
    eps_q,
    *,
    key_encoder=None,
    xk=None,
    eps_k=None,
    gamma=1.0,
    kind="gaussian",
    temperature=1.0,
):
    """One forward pass of the training objective on a batch.

    The query view is encoded, sampled, decoded and scored by the ELBO terms.
    When ``key_encoder`` is given, the key view is encoded without gradient
    and the sampled query/key codes enter InfoNCE. Without a key encoder the
    objective is the plain VAE loss.
    """
    posterior = encode(encoder, xq, "train")
    zq = reparameterize(posterior, eps_q)
    xhat = decode(decoder, zq, "train")
    recon = recon_loss(xq, xhat, kind)
    kl = kl_to_prior(posterior)
    vae = recon + kl
    if key_encoder is None:
        return CRLosses(vae, vae, recon, kl, None)
    with torch.no_grad():
        zk = reparameterize(encode(key_encoder, xk, "train"), eps_k)
    nce = info_nce(zq, zk, temperature)
    return CRLosses(cr_loss(vae, nce, gamma), vae, recon, kl, nce)
