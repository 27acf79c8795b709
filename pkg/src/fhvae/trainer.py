"""Segment scheduling, Adam training with L2, dev-bound early stopping."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .checkpoint import Checkpoint, save_checkpoint
from .data import Corpus, Utterance, segments_per_epoch
from .errors import DataError, InputContractError, NumericError
from .model import ArchConfig, LatentConfig, SVectorTable, build_model
from .objective import LossBreakdown, dis_lower_bound, segment_lower_bound, vae_elbo

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 128
    lr: float = 1e-3
    adam_beta1: float = 0.95
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    l2_weight: float = 1e-4
    patience_epochs: int = 50
    alpha: float = 10.0
    seed: int = 0
    max_epochs: int = 1000

    def __post_init__(self):
        if self.batch_size < 1:
            raise InputContractError("batch_size must be >= 1")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise InputContractError("Adam betas must lie in [0, 1)")
        if self.patience_epochs < 1 or self.max_epochs < 1:
            raise InputContractError("patience_epochs and max_epochs must be >= 1")
        if self.alpha < 0 or self.lr < 0 or self.l2_weight < 0:
            raise InputContractError("alpha, lr and l2_weight must be non-negative")

    def to_dict(self):
        return asdict(self)


@dataclass
class SegmentBatch:
    data: Tensor  # (B, W, D)
    seq_index: Tensor  # (B,) rows into the s-vector table
    seg_count: Tensor  # (B,) N of each segment's sequence
    utt_index: np.ndarray
    start: np.ndarray

    def __len__(self):
        return self.data.shape[0]


class SegmentSource:
    """Frames of a corpus packed into one tensor for fast window gathering."""

    def __init__(self, corpus: Corpus, width: int, dtype=torch.float32):
        for u in corpus.utterances:
            if u.num_frames < width:
                raise DataError(
                    f"utterance {u.utt_id!r} has {u.num_frames} frames, fewer than the window width {width}"
                )
        self.corpus = corpus
        self.width = width
        self.lengths = np.array([u.num_frames for u in corpus.utterances], dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(self.lengths)[:-1]]).astype(np.int64)
        self.frames = torch.from_numpy(
            np.concatenate([u.frames for u in corpus.utterances])
        ).to(dtype)
        self.seg_counts = torch.from_numpy(corpus.seg_counts(width))
        self.seq_of = torch.from_numpy(corpus.seq_of)

    def windows(self, utt_index: np.ndarray, start: np.ndarray) -> Tensor:
        rows = (self.offsets[utt_index] + start)[:, None] + np.arange(self.width)
        return self.frames[torch.from_numpy(rows)]

    def batch(self, utt_index: np.ndarray, start: np.ndarray) -> SegmentBatch:
        seq = self.seq_of[torch.from_numpy(utt_index)]
        return SegmentBatch(self.windows(utt_index, start), seq, self.seg_counts[seq],
                            utt_index, start)


def schedule_epoch(lengths: np.ndarray, width: int, rng: np.random.Generator):
    """Per-epoch (utterance, start) pairs: max(1, T // W) random starts each, shuffled."""
    counts = np.array([segments_per_epoch(int(T), width) for T in lengths])
    utt = np.repeat(np.arange(len(lengths)), counts)
    start = rng.integers(0, lengths[utt] - width + 1)
    order = rng.permutation(len(utt))
    return utt[order], start[order]


def sample_segment_batches(source: SegmentSource, rng: np.random.Generator,
                           batch_size: int) -> list[SegmentBatch]:
    """One epoch of segment batches; the final batch may be short."""
    utt, start = schedule_epoch(source.lengths, source.width, rng)
    return [source.batch(utt[i : i + batch_size], start[i : i + batch_size])
            for i in range(0, len(utt), batch_size)]


class EarlyStopping:
    """Tracks the best dev bound; signals a stop after ``patience`` flat epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = 0
        self.since_improvement = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record ``value`` for ``epoch``; return True if it is a new best."""
        if value > self.best:
            self.best, self.best_epoch, self.since_improvement = value, epoch, 0
            return True
        self.since_improvement += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.since_improvement >= self.patience


class RowAdam:
    """Adam applied only to selected rows of a matrix parameter.

    Rows keep their own step counts, so bias correction reflects how many
    updates each row has actually received.
    """

    def __init__(self, param: torch.nn.Parameter, lr: float, betas, eps: float):
        self.param = param
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = torch.zeros_like(param)
        self.v = torch.zeros_like(param)
        self.steps = torch.zeros(param.shape[0], dtype=torch.long)

    @torch.no_grad()
    def step(self, rows: Tensor):
        g = self.param.grad[rows]
        self.steps[rows] += 1
        t = self.steps[rows].to(g.dtype).unsqueeze(1)
        self.m[rows] = self.beta1 * self.m[rows] + (1 - self.beta1) * g
        self.v[rows] = self.beta2 * self.v[rows] + (1 - self.beta2) * g * g
        m_hat = self.m[rows] / (1 - self.beta1 ** t)
        v_hat = self.v[rows] / (1 - self.beta2 ** t)
        self.param[rows] -= self.lr * m_hat / (v_hat.sqrt() + self.eps)


class Trainer:
    def __init__(self, model, table: SVectorTable | None, config: TrainConfig):
        self.model = model
        self.table = table
        self.config = config
        betas = (config.adam_beta1, config.adam_beta2)
        self.net_opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=betas,
                                        eps=config.adam_eps)
        self.table_opt = None
        if table is not None:
            self.table_opt = RowAdam(table.weight, config.lr, betas, config.adam_eps)
        self.rng = np.random.default_rng(config.seed)
        self.noise_gen = torch.Generator().manual_seed(config.seed)
        self.epoch = 0

    @property
    def dtype(self):
        return next(self.model.parameters()).dtype

    def _noise(self, batch: int, dim: int) -> Tensor:
        return torch.randn(batch, dim, generator=self.noise_gen, dtype=self.dtype)

    def bound(self, batch: SegmentBatch) -> LossBreakdown:
        lat = self.model.latent
        B = len(batch)
        if self.model.mode == "vae":
            return vae_elbo(self.model, batch.data, self._noise(B, lat.dim_z_vae))
        return dis_lower_bound(self.model, self.table, batch.data, batch.seq_index,
                               batch.seg_count, self.config.alpha,
                               self._noise(B, lat.dim_z2), self._noise(B, lat.dim_z1))

    def l2_penalty(self) -> Tensor:
        return sum(p.pow(2).sum() for p in self.model.parameters())

    def train_step(self, batch: SegmentBatch) -> LossBreakdown:
        """One Adam update on -mean(bound) + l2 * ||net params||^2; returns the pre-update bound."""
        self.model.train()
        bd = self.bound(batch)
        loss = -bd.total.mean() + self.config.l2_weight * self.l2_penalty()
        if not torch.isfinite(loss):
            raise NumericError("loss")
        self.net_opt.zero_grad(set_to_none=True)
        if self.table is not None:
            self.table.weight.grad = None
        loss.backward()
        self.net_opt.step()
        if self.table is not None:
            # only rows of sequences present in the batch are updated
            self.table_opt.step(torch.unique(batch.seq_index))
        return _detach(bd.mean())

    def train_epoch(self, source: SegmentSource) -> dict:
        sums, n = {}, 0
        for batch in sample_segment_batches(source, self.rng, self.config.batch_size):
            bd = self.train_step(batch)
            for k, v in bd.as_floats().items():
                sums[k] = sums.get(k, 0.0) + v * len(batch)
            n += len(batch)
        self.epoch += 1
        return {k: v / n for k, v in sums.items()}


def _detach(bd: LossBreakdown) -> LossBreakdown:
    return LossBreakdown(*(getattr(bd, k).detach() for k in
                           ("recon", "kl_z1", "kl_z2", "logp_mu2_scaled", "disc", "total")),
                         alpha=bd.alpha)


class DevEvaluator:
    """Mean dev-set bound with frozen noise over non-overlapping windows.

    The FHVAE bound excludes the discriminative term and uses estimated
    s-vectors, since dev sequences have no table rows.
    """

    def __init__(self, utterances: list[Utterance], model, seed: int):
        if not utterances:
            raise DataError("dev set is empty")
        from .extraction import nonoverlapping_windows

        lat = model.latent
        dtype = next(model.parameters()).dtype
        wins, utt = [], []
        for k, u in enumerate(utterances):
            w = nonoverlapping_windows(u, lat.width)
            wins.append(w)
            utt += [k] * len(w)
        self.windows = torch.from_numpy(np.concatenate(wins)).to(dtype)
        self.utt = torch.tensor(utt)
        self.n_utts = len(utterances)
        self.seg_count = torch.bincount(self.utt, minlength=self.n_utts)[self.utt]
        gen = torch.Generator().manual_seed(seed + 7919)
        B = self.windows.shape[0]
        self.noise_a = torch.randn(B, max(lat.dim_z2, lat.dim_z_vae), generator=gen, dtype=dtype)
        self.noise_b = torch.randn(B, lat.dim_z1, generator=gen, dtype=dtype)

    @torch.no_grad()
    def __call__(self, model) -> dict:
        model.eval()
        lat = model.latent
        if model.mode == "vae":
            bd = vae_elbo(model, self.windows, self.noise_a[:, : lat.dim_z_vae])
        else:
            table = SVectorTable([str(i) for i in range(self.n_utts)], lat.dim_z2).to(self.windows.dtype)
            table.weight.data.copy_(self._svectors(model))
            bd = segment_lower_bound(model, table, self.windows, self.utt, self.seg_count,
                                     self.noise_a[:, : lat.dim_z2], self.noise_b)
        return bd.as_floats()

    def _svectors(self, model) -> Tensor:
        from .extraction import svector_map

        lat = model.latent
        means = model.encode_z2(self.windows).mean
        return torch.stack([svector_map(means[self.utt == k], lat.var_z2, lat.var_mu2)
                            for k in range(self.n_utts)])


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    stop_epoch: int = 0
    best_epoch: int = 0
    best_dev_bound: float = float("-inf")
    checkpoint_path: str | None = None

    def write(self, path) -> None:
        """One JSON record per epoch, then a summary record."""
        with open(path, "w") as f:
            for rec in self.epochs:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
            f.write(json.dumps({"summary": {
                "stop_epoch": self.stop_epoch, "best_epoch": self.best_epoch,
                "best_dev_bound": self.best_dev_bound, "checkpoint_path": self.checkpoint_path,
            }}, sort_keys=True) + "\n")


def fit(corpus: Corpus, dev: list[Utterance], model, table: SVectorTable | None,
        config: TrainConfig, checkpoint_path=None, meta: dict | None = None):
    """Train until the dev bound stalls for ``patience_epochs`` or ``max_epochs``.

    The best-dev parameters are restored into ``model``/``table`` on return.
    """
    if not corpus.utterances:
        raise DataError("training set is empty")
    dtype = next(model.parameters()).dtype
    source = SegmentSource(corpus, model.latent.width, dtype)
    evaluate = DevEvaluator(dev, model, config.seed)
    trainer = Trainer(model, table, config)
    stopper = EarlyStopping(config.patience_epochs)
    report = TrainReport()
    best_state = None

    for epoch in range(1, config.max_epochs + 1):
        train_terms = trainer.train_epoch(source)
        dev_terms = evaluate(model)
        improved = stopper.update(epoch, dev_terms["total"])
        report.epochs.append({
            "epoch": epoch,
            "train_bound": train_terms["total"],
            "dev_bound": dev_terms["total"],
            "train": train_terms,
            "dev": dev_terms,
        })
        log.info("epoch %d train %.3f dev %.3f", epoch, train_terms["total"], dev_terms["total"])
        if improved:
            best_state = (copy.deepcopy(model.state_dict()),
                          None if table is None else table.weight.detach().clone())
        if stopper.should_stop:
            break

    report.stop_epoch = epoch
    report.best_epoch = stopper.best_epoch
    report.best_dev_bound = stopper.best
    model.load_state_dict(best_state[0])
    if table is not None:
        with torch.no_grad():
            table.weight.copy_(best_state[1])
    ckpt = Checkpoint(model, table, corpus.seq_label, corpus.utt_to_row() if table is not None else {},
                      meta=dict(meta or {}, train_config=config.to_dict(),
                                best_epoch=report.best_epoch))
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, ckpt)
        report.checkpoint_path = str(checkpoint_path)
    return ckpt, report


def train_new(corpus: Corpus, dev: list[Utterance], mode: str, latent: LatentConfig,
              arch: ArchConfig, config: TrainConfig, checkpoint_path=None, meta=None):
    """Build a freshly initialised model (and table in FHVAE mode) and fit it."""
    model = build_model(mode, latent, arch, seed=config.seed)
    table = SVectorTable(corpus.seq_ids, latent.dim_z2) if mode == "fhvae" else None
    return fit(corpus, dev, model, table, config, checkpoint_path, meta)
