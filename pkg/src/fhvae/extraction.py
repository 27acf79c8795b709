"""S-vector estimation and frame-aligned latent feature extraction."""

from __future__ import annotations

import enum

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view

from .checkpoint import Checkpoint
from .data import Utterance
from .errors import DataError, ModeError

CHUNK = 4096


class ExtractionMode(str, enum.Enum):
    Z1 = "z1"
    Z_VAE = "z"
    Z1Z2 = "z1z2"
    Z1_MU2 = "z1mu2"

    @property
    def required_model(self) -> str:
        return "vae" if self is ExtractionMode.Z_VAE else "fhvae"


def _check_length(utt: Utterance, width: int):
    if utt.num_frames < width:
        raise DataError(
            f"utterance {utt.utt_id!r} has {utt.num_frames} frames, fewer than the window width {width}"
        )


def nonoverlapping_windows(utt: Utterance, width: int) -> np.ndarray:
    _check_length(utt, width)
    n = utt.num_frames // width
    return utt.frames[: n * width].reshape(n, width, -1)


def sliding_windows(utt: Utterance, width: int) -> np.ndarray:
    """All T - W + 1 windows at stride one, shape (T - W + 1, W, D)."""
    _check_length(utt, width)
    return sliding_window_view(utt.frames, width, axis=0).transpose(0, 2, 1)


def svector_map(z2_means, var_z2: float, var_mu2: float):
    """MAP s-vector given per-window z2 posterior means.

    Maximises log N(mu2; 0, var_mu2 I) + sum_n log N(m_n; mu2, var_z2 I),
    which gives sum_n m_n / (N + var_z2 / var_mu2).
    """
    n = z2_means.shape[0]
    return z2_means.sum(0) / (n + var_z2 / var_mu2)


def _batched_apply(fn, windows: np.ndarray, dtype):
    outs = []
    for i in range(0, len(windows), CHUNK):
        x = torch.from_numpy(np.array(windows[i : i + CHUNK])).to(dtype)
        outs.append(fn(x))
    return outs


@torch.no_grad()
def estimate_svector(utt: Utterance, model) -> torch.Tensor:
    if model.mode != "fhvae":
        raise ModeError("s-vectors exist only for FHVAE models")
    lat = model.latent
    dtype = next(model.parameters()).dtype
    windows = nonoverlapping_windows(utt, lat.width)
    means = torch.cat(_batched_apply(lambda x: model.encode_z2(x).mean, windows, dtype))
    return svector_map(means, lat.var_z2, lat.var_mu2)


def pad_to_length(derived: np.ndarray, width: int) -> np.ndarray:
    """Replicate the first/last derived frame so T - W + 1 rows become T."""
    front = width // 2  # ceil((W - 1) / 2)
    back = (width - 1) // 2
    return np.pad(derived, ((front, back), (0, 0)), mode="edge")


@torch.no_grad()
def window_posteriors(model, windows: np.ndarray) -> dict[str, np.ndarray]:
    """Posterior means and variances for a stack of windows.

    FHVAE: q(z2|x), then q(z1|x, E[z2]). VAE: q(z|x). No sampling.
    """
    model.eval()
    dtype = next(model.parameters()).dtype

    def run(x):
        if model.mode == "vae":
            q = model.encode(x)
            return {"z_mean": q.mean, "z_var": q.var}
        q2 = model.encode_z2(x)
        q1 = model.encode_z1(x, q2.mean)
        return {"z1_mean": q1.mean, "z1_var": q1.var, "z2_mean": q2.mean, "z2_var": q2.var}

    parts = _batched_apply(run, windows, dtype)
    return {k: torch.cat([p[k] for p in parts]).numpy() for k in parts[0]}


def extract_features(utt: Utterance, ckpt: Checkpoint, mode: ExtractionMode | str,
                     svector: np.ndarray | None = None) -> np.ndarray:
    """Frame-aligned (T x F) features of ``utt`` in the requested mode.

    For Z1_MU2 the s-vector is, in order of preference, ``svector``, the
    table row of a training utterance, or the MAP estimate.
    """
    mode = ExtractionMode(mode)
    if ckpt.mode != mode.required_model:
        raise ModeError(f"feature {mode.value!r} needs a {mode.required_model} checkpoint, "
                        f"got {ckpt.mode}")
    model = ckpt.model
    width = model.latent.width
    post = window_posteriors(model, sliding_windows(utt, width))
    if mode is ExtractionMode.Z_VAE:
        cols = [post["z_mean"], post["z_var"]]
    elif mode is ExtractionMode.Z1Z2:
        cols = [post["z1_mean"], post["z1_var"], post["z2_mean"], post["z2_var"]]
    else:
        cols = [post["z1_mean"], post["z1_var"]]
    feats = pad_to_length(np.concatenate(cols, axis=1), width)
    if mode is ExtractionMode.Z1_MU2:
        if svector is None:
            svector = utterance_svector(utt, ckpt)
        feats = np.concatenate([feats, np.broadcast_to(svector, (len(feats), len(svector)))], axis=1)
    return feats.astype(np.float32)


def utterance_svector(utt: Utterance, ckpt: Checkpoint) -> np.ndarray:
    row = ckpt.row_for(utt.utt_id)
    if row is not None and ckpt.table is not None:
        return ckpt.table.weight[row].detach().numpy()
    return estimate_svector(utt, ckpt.model).numpy()
