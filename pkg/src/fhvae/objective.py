"""Segment lower bounds for the FHVAE and the VAE baseline.

Every function returns bound values (larger is better); the trainer negates
them. Batched inputs are ``(B, W, D)`` windows and the returned
:class:`LossBreakdown` holds one value per segment.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .errors import InputContractError, ModeError, NumericError
from .model import (
    FHVAE,
    VAE,
    SVectorTable,
    gaussian_log_prob,
    isotropic,
    kl_diag_gaussian,
    reparam_sample,
)

_TERMS = ("recon", "kl_z1", "kl_z2", "logp_mu2_scaled", "disc", "total")


@dataclass
class LossBreakdown:
    recon: Tensor
    kl_z1: Tensor
    kl_z2: Tensor
    logp_mu2_scaled: Tensor
    disc: Tensor
    total: Tensor
    alpha: float = 0.0

    def mean(self) -> "LossBreakdown":
        """Batch mean of every term; ``total`` is recombined from the means."""
        m = {k: getattr(self, k).mean() for k in _TERMS[:-1]}
        return LossBreakdown(total=combine(alpha=self.alpha, **m), alpha=self.alpha, **m)

    def as_floats(self) -> dict:
        out = {k: float(getattr(self, k).mean()) for k in _TERMS}
        out["alpha"] = float(self.alpha)
        return out


def combine(recon, kl_z1, kl_z2, logp_mu2_scaled, disc, alpha):
    return recon - kl_z1 - kl_z2 + logp_mu2_scaled + alpha * disc


def _check_finite(**terms):
    for name, value in terms.items():
        if not torch.isfinite(value).all():
            raise NumericError(name)


def _batched(x: Tensor, *per_segment):
    if x.dim() == 2:
        x = x.unsqueeze(0)
    out = [x]
    for v in per_segment:
        v = torch.as_tensor(v)
        out.append(v.reshape(1) if v.dim() == 0 else v)
    return out


def _noise(noise, batch: int, dim: int, name: str) -> Tensor:
    if noise.shape[-1] != dim:
        raise InputContractError(f"{name} must have length {dim}")
    return noise.reshape(batch, dim) if noise.dim() == 1 else noise


def discriminative_logprob(z2: Tensor, i, table: SVectorTable, var_z2: float) -> Tensor:
    """log p(i | z2): log-softmax over every table row of log N(z2; row_j, var_z2 I)."""
    if len(table) == 0:
        raise InputContractError("s-vector table is empty")
    if z2.shape[-1] != table.dim:
        raise InputContractError(f"z2 must have length {table.dim}")
    single = z2.dim() == 1
    z2 = z2.reshape(-1, table.dim)
    idx = torch.as_tensor(i, dtype=torch.long).reshape(-1)
    table.lookup(idx)  # range check
    rows = table.weight.unsqueeze(0)
    logits = gaussian_log_prob(z2.unsqueeze(1), isotropic(rows.expand(z2.shape[0], -1, -1), var_z2))
    out = logits.gather(1, idx.unsqueeze(1)).squeeze(1) - torch.logsumexp(logits, dim=1)
    return out[0] if single else out


def _fhvae_terms(model, table, x, seq_index, seg_count, noise_z2, noise_z1):
    if model.mode != "fhvae":
        raise ModeError("FHVAE objective requires an FHVAE model")
    lat = model.latent
    x, seq_index, seg_count = _batched(x, seq_index, seg_count)
    B = x.shape[0]
    noise_z2 = _noise(noise_z2, B, lat.dim_z2, "noise_z2")
    noise_z1 = _noise(noise_z1, B, lat.dim_z1, "noise_z1")
    mu2 = table.lookup(seq_index.long())

    q_z2 = model.encode_z2(x)
    z2 = reparam_sample(q_z2, noise_z2)
    q_z1 = model.encode_z1(x, z2)
    z1 = reparam_sample(q_z1, noise_z1)
    p_x = model.decode(z1, z2)

    recon = gaussian_log_prob(x.flatten(1), p_x)
    kl_z1 = kl_diag_gaussian(q_z1, isotropic(torch.zeros_like(q_z1.mean), lat.var_z1))
    kl_z2 = kl_diag_gaussian(q_z2, isotropic(mu2, lat.var_z2))
    logp_mu2 = gaussian_log_prob(mu2, isotropic(torch.zeros_like(mu2), lat.var_mu2))
    logp_mu2_scaled = logp_mu2 / seg_count.to(logp_mu2.dtype)
    _check_finite(recon=recon, kl_z1=kl_z1, kl_z2=kl_z2, logp_mu2_scaled=logp_mu2_scaled)
    return recon, kl_z1, kl_z2, logp_mu2_scaled, z2, seq_index


def segment_lower_bound(model: FHVAE, table: SVectorTable, x: Tensor, seq_index, seg_count,
                        noise_z2: Tensor, noise_z1: Tensor) -> LossBreakdown:
    """Single-sample estimate of the segment variational lower bound."""
    recon, kl_z1, kl_z2, logp, _, _ = _fhvae_terms(
        model, table, x, seq_index, seg_count, noise_z2, noise_z1
    )
    disc = torch.zeros_like(recon)
    return LossBreakdown(recon, kl_z1, kl_z2, logp, disc,
                         combine(recon, kl_z1, kl_z2, logp, disc, 0.0), 0.0)


def dis_lower_bound(model: FHVAE, table: SVectorTable, x: Tensor, seq_index, seg_count,
                    alpha: float, noise_z2: Tensor, noise_z1: Tensor) -> LossBreakdown:
    """Segment bound plus ``alpha * log p(i | z2)`` at the same z2 sample."""
    if alpha < 0:
        raise InputContractError("alpha must be non-negative")
    recon, kl_z1, kl_z2, logp, z2, idx = _fhvae_terms(
        model, table, x, seq_index, seg_count, noise_z2, noise_z1
    )
    disc = discriminative_logprob(z2, idx, table, model.latent.var_z2)
    _check_finite(disc=disc)
    total = combine(recon, kl_z1, kl_z2, logp, disc, alpha)
    return LossBreakdown(recon, kl_z1, kl_z2, logp, disc, total, alpha)


def vae_elbo(model: VAE, x: Tensor, noise: Tensor) -> LossBreakdown:
    """Reconstruction minus KL(q(z|x) || N(0, I)); the KL lands in ``kl_z1``."""
    if model.mode != "vae":
        raise ModeError("vae_elbo requires a VAE model")
    (x,) = _batched(x)
    noise = _noise(noise, x.shape[0], model.latent.dim_z_vae, "noise")
    q_z = model.encode(x)
    z = reparam_sample(q_z, noise)
    recon = gaussian_log_prob(x.flatten(1), model.decode(z))
    kl = kl_diag_gaussian(q_z, isotropic(torch.zeros_like(q_z.mean), 1.0))
    _check_finite(recon=recon, kl_z1=kl)
    zero = torch.zeros_like(recon)
    return LossBreakdown(recon, kl, zero, zero, zero, combine(recon, kl, zero, zero, zero, 0.0))
