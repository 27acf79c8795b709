"""FHVAE encoders, decoder, s-vector table and diagonal-Gaussian helpers.

All network heads emit a :class:`DiagGaussian` whose log-variance is clamped
to ``[LOGVAR_MIN, LOGVAR_MAX]``. The vanilla VAE baseline is built from the
same encoder/decoder blocks with a single latent.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import torch
from torch import Tensor, nn

from .errors import InputContractError

LOGVAR_MIN = -7.0
LOGVAR_MAX = 7.0
INIT_SCALE = 0.05
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class LatentConfig:
    dim_z1: int = 32
    dim_z2: int = 32
    dim_z_vae: int = 64
    var_mu2: float = 1.0
    var_z1: float = 1.0
    var_z2: float = 0.25
    var_mu2_post: float = math.exp(-2.0)
    width: int = 20
    input_dim: int = 80

    def __post_init__(self):
        for name in ("dim_z1", "dim_z2", "dim_z_vae", "width", "input_dim"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise InputContractError(f"{name} must be a positive int, got {value!r}")
        for name in ("var_mu2", "var_z1", "var_z2", "var_mu2_post"):
            if not getattr(self, name) > 0:
                raise InputContractError(f"{name} must be strictly positive")

    def to_dict(self):
        return asdict(self)


@dataclass
class ArchConfig:
    layers: int = 1
    units: int = 64
    cell: str = "lstm"  # "lstm" or "ff"

    def __post_init__(self):
        if self.cell not in ("lstm", "ff"):
            raise InputContractError(f"unknown cell type {self.cell!r}")
        if self.layers < 1 or self.units < 1:
            raise InputContractError("layers and units must be >= 1")

    def to_dict(self):
        return asdict(self)


class DiagGaussian(NamedTuple):
    mean: Tensor
    logvar: Tensor

    @property
    def var(self) -> Tensor:
        return self.logvar.exp()

    def __len__(self):
        return self.mean.shape[-1]


def isotropic(mean: Tensor, var: float) -> DiagGaussian:
    """Gaussian with covariance ``var * I`` centred at ``mean``."""
    return DiagGaussian(mean, torch.full_like(mean, math.log(var)))


def _check_lengths(a: Tensor, b: Tensor, what: str):
    if a.shape[-1] != b.shape[-1]:
        raise InputContractError(
            f"{what}: length mismatch ({a.shape[-1]} vs {b.shape[-1]})"
        )


def gaussian_log_prob(v: Tensor, g: DiagGaussian) -> Tensor:
    """Log density of ``v`` under ``g``, summed over the last dimension."""
    _check_lengths(v, g.mean, "gaussian_log_prob")
    sq = (v - g.mean) ** 2 * torch.exp(-g.logvar)
    return torch.sum(-0.5 * _LOG_2PI - 0.5 * g.logvar - 0.5 * sq, dim=-1)


def kl_diag_gaussian(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    _check_lengths(q.mean, p.mean, "kl_diag_gaussian")
    _check_lengths(q.logvar, p.logvar, "kl_diag_gaussian")
    ratio = torch.exp(q.logvar - p.logvar)
    sq = (q.mean - p.mean) ** 2 * torch.exp(-p.logvar)
    return 0.5 * torch.sum(p.logvar - q.logvar + ratio + sq - 1.0, dim=-1)


def reparam_sample(g: DiagGaussian, noise: Tensor) -> Tensor:
    _check_lengths(g.mean, noise, "reparam_sample")
    return g.mean + torch.exp(0.5 * g.logvar) * noise


class _GaussianHead(nn.Module):
    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.mean = nn.Linear(in_features, out_features)
        self.logvar = nn.Linear(in_features, out_features)

    def forward(self, h: Tensor) -> DiagGaussian:
        logvar = torch.clamp(self.logvar(h), LOGVAR_MIN, LOGVAR_MAX)
        return DiagGaussian(self.mean(h), logvar)


def _mlp(in_features: int, arch: ArchConfig) -> nn.Sequential:
    layers = []
    for _ in range(arch.layers):
        layers += [nn.Linear(in_features, arch.units), nn.Tanh()]
        in_features = arch.units
    return nn.Sequential(*layers)


class SegmentEncoder(nn.Module):
    """Maps a (B, W, F) window batch to a diagonal Gaussian over the latent.

    The recurrent variant summarises the window with the top-layer final
    hidden state; the feedforward variant flattens the window.
    """

    def __init__(self, width: int, in_features: int, out_dim: int, arch: ArchConfig):
        super().__init__()
        self.cell = arch.cell
        if arch.cell == "lstm":
            self.rnn = nn.LSTM(in_features, arch.units, arch.layers, batch_first=True)
        else:
            self.rnn = _mlp(width * in_features, arch)
        self.head = _GaussianHead(arch.units, out_dim)

    def forward(self, x: Tensor) -> DiagGaussian:
        if self.cell == "lstm":
            _, (h, _) = self.rnn(x)
            summary = h[-1]
        else:
            summary = self.rnn(x.flatten(1))
        return self.head(summary)


class SegmentDecoder(nn.Module):
    """Maps a latent code to a Gaussian over the flattened (W * D) window.

    Recurrent wiring: the code sets the initial hidden state of every layer
    and is also fed as the input at each of the W steps.
    """

    def __init__(self, width: int, out_features: int, z_dim: int, arch: ArchConfig):
        super().__init__()
        self.cell = arch.cell
        self.width = width
        self.out_features = out_features
        self.layers = arch.layers
        self.units = arch.units
        if arch.cell == "lstm":
            self.init_state = nn.Linear(z_dim, arch.layers * arch.units)
            self.rnn = nn.LSTM(z_dim, arch.units, arch.layers, batch_first=True)
            self.head = _GaussianHead(arch.units, out_features)
        else:
            self.rnn = _mlp(z_dim, arch)
            self.head = _GaussianHead(arch.units, width * out_features)

    def forward(self, z: Tensor) -> DiagGaussian:
        batch = z.shape[0]
        if self.cell == "ff":
            return self.head(self.rnn(z))
        h0 = torch.tanh(self.init_state(z)).view(batch, self.layers, self.units)
        h0 = h0.transpose(0, 1).contiguous()
        c0 = torch.zeros_like(h0)
        inputs = z.unsqueeze(1).expand(batch, self.width, z.shape[-1])
        out, _ = self.rnn(inputs, (h0, c0))
        g = self.head(out)
        return DiagGaussian(g.mean.flatten(1), g.logvar.flatten(1))


def _as_batch(x: Tensor, latent: LatentConfig) -> tuple[Tensor, bool]:
    if x.dim() == 2:
        x, single = x.unsqueeze(0), True
    else:
        single = False
    if x.dim() != 3 or tuple(x.shape[1:]) != (latent.width, latent.input_dim):
        raise InputContractError(
            f"expected window of shape ({latent.width}, {latent.input_dim}), "
            f"got {tuple(x.shape)}"
        )
    if not torch.isfinite(x).all():
        raise InputContractError("input window contains non-finite values")
    return x, single


def _as_code_batch(z: Tensor, dim: int, name: str, batch: int | None = None) -> Tensor:
    if z.shape[-1] != dim:
        raise InputContractError(f"{name} must have length {dim}, got {z.shape[-1]}")
    if z.dim() == 1:
        z = z.unsqueeze(0)
    if batch is not None and z.shape[0] != batch:
        raise InputContractError(f"{name} batch size {z.shape[0]} != {batch}")
    return z


def _unbatch(g: DiagGaussian, single: bool) -> DiagGaussian:
    return DiagGaussian(g.mean[0], g.logvar[0]) if single else g


class FHVAE(nn.Module):
    """Factorized hierarchical VAE over fixed-width segments.

    ``encode_z2`` gives q(z2|x); ``encode_z1`` gives q(z1|x, z2) with z2
    appended to every input frame; ``decode`` gives p(x|z1, z2).
    """

    mode = "fhvae"

    def __init__(self, latent: LatentConfig, arch: ArchConfig):
        super().__init__()
        self.latent = latent
        self.arch = arch
        W, D = latent.width, latent.input_dim
        self.encoder_z2 = SegmentEncoder(W, D, latent.dim_z2, arch)
        self.encoder_z1 = SegmentEncoder(W, D + latent.dim_z2, latent.dim_z1, arch)
        self.decoder = SegmentDecoder(W, D, latent.dim_z1 + latent.dim_z2, arch)

    def encode_z2(self, x: Tensor) -> DiagGaussian:
        x, single = _as_batch(x, self.latent)
        return _unbatch(self.encoder_z2(x), single)

    def encode_z1(self, x: Tensor, z2: Tensor) -> DiagGaussian:
        x, single = _as_batch(x, self.latent)
        z2 = _as_code_batch(z2, self.latent.dim_z2, "z2", x.shape[0])
        tiled = z2.unsqueeze(1).expand(-1, x.shape[1], -1)
        return _unbatch(self.encoder_z1(torch.cat([x, tiled], dim=-1)), single)

    def decode(self, z1: Tensor, z2: Tensor) -> DiagGaussian:
        single = z1.dim() == 1
        z1 = _as_code_batch(z1, self.latent.dim_z1, "z1")
        z2 = _as_code_batch(z2, self.latent.dim_z2, "z2", z1.shape[0])
        return _unbatch(self.decoder(torch.cat([z1, z2], dim=-1)), single)


class VAE(nn.Module):
    """Single-latent baseline sharing the FHVAE building blocks."""

    mode = "vae"

    def __init__(self, latent: LatentConfig, arch: ArchConfig):
        super().__init__()
        self.latent = latent
        self.arch = arch
        W, D = latent.width, latent.input_dim
        self.encoder = SegmentEncoder(W, D, latent.dim_z_vae, arch)
        self.decoder = SegmentDecoder(W, D, latent.dim_z_vae, arch)

    def encode(self, x: Tensor) -> DiagGaussian:
        x, single = _as_batch(x, self.latent)
        return _unbatch(self.encoder(x), single)

    def decode(self, z: Tensor) -> DiagGaussian:
        single = z.dim() == 1
        z = _as_code_batch(z, self.latent.dim_z_vae, "z")
        return _unbatch(self.decoder(z), single)


class SVectorTable(nn.Module):
    """Trainable per-sequence posterior means of the s-vector (one row each)."""

    def __init__(self, seq_ids: Sequence[str], dim: int):
        super().__init__()
        self.seq_ids = list(seq_ids)
        if len(set(self.seq_ids)) != len(self.seq_ids):
            raise InputContractError("sequence ids must be unique")
        self.index = {s: i for i, s in enumerate(self.seq_ids)}
        self.weight = nn.Parameter(torch.zeros(len(self.seq_ids), dim))

    def __len__(self):
        return self.weight.shape[0]

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    def lookup(self, i) -> Tensor:
        M = len(self)
        if M == 0:
            raise InputContractError("s-vector table is empty")
        idx = torch.as_tensor(i, dtype=torch.long)
        if idx.numel() and (idx.min() < 0 or idx.max() >= M):
            raise InputContractError(f"sequence index out of range [0, {M})")
        return self.weight[idx]


def init_uniform_(module: nn.Module, seed: int, scale: float = INIT_SCALE) -> nn.Module:
    """Uniform(-scale, scale) init of every network parameter, table excluded."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in module.named_parameters():
            p.copy_(torch.rand(p.shape, generator=gen, dtype=p.dtype) * 2 * scale - scale)
    return module


def build_model(mode: str, latent: LatentConfig, arch: ArchConfig, seed: int = 0):
    if mode == "fhvae":
        model = FHVAE(latent, arch)
    elif mode == "vae":
        model = VAE(latent, arch)
    else:
        raise InputContractError(f"unknown model mode {mode!r}")
    return init_uniform_(model, seed)
