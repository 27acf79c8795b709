"""Desk-scale experiment runner on the synthetic two-domain corpus.

Trains the VAE baseline and FHVAE models for a list of alpha values on one
seeded corpus and collects invariance reports, s-vector spreads and
disentanglement probes.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from .checkpoint import Checkpoint, save_checkpoint
from .data import SyntheticCorpus, SyntheticSpec, domain_subset, generate_synthetic, group_sequences_by_label
from .eval import disentanglement_probes, invariance_report, svector_spread
from .model import ArchConfig, LatentConfig
from .trainer import TrainConfig, train_new


@dataclass
class HarnessConfig:
    spec: SyntheticSpec = field(default_factory=SyntheticSpec)
    latent: dict = field(default_factory=dict)  # LatentConfig overrides
    arch: ArchConfig = field(default_factory=ArchConfig)
    max_epochs: int = 400
    patience_epochs: int = 50
    seq_label: str = "uttid"
    seed: int = 0

    def latent_config(self) -> LatentConfig:
        return LatentConfig(**dict(dict(width=self.spec.width, input_dim=self.spec.dim),
                                   **self.latent))

    def train_config(self, alpha=0.0) -> TrainConfig:
        return TrainConfig(alpha=alpha, seed=self.seed, max_epochs=self.max_epochs,
                           patience_epochs=self.patience_epochs)

    def to_dict(self):
        return {"spec": self.spec.to_dict(), "latent": self.latent_config().to_dict(),
                "arch": self.arch.to_dict(), "max_epochs": self.max_epochs,
                "patience_epochs": self.patience_epochs, "seq_label": self.seq_label,
                "seed": self.seed}


class Harness:
    """Lazily trains and caches models on one synthetic corpus."""

    def __init__(self, config: HarnessConfig | None = None, out_dir=None, log=None,
                 data: SyntheticCorpus | None = None):
        self.config = config or HarnessConfig()
        self.data = data if data is not None else generate_synthetic(self.config.spec)
        self.corpus = group_sequences_by_label(self.data.train, self.config.seq_label)
        self.clean_train = domain_subset(self.data.train, "clean")
        self.tests = {"clean": self.data.test_clean, "shifted": self.data.test_shifted}
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.log = log or (lambda msg: None)
        self._models: dict[str, Checkpoint] = {}
        self.train_reports: dict = {}

    def _train(self, key, mode, alpha=0.0) -> Checkpoint:
        if key not in self._models:
            cfg = self.config
            path = self.out_dir / f"{key}.ckpt" if self.out_dir is not None else None
            tic = time.perf_counter()
            ckpt, report = train_new(self.corpus, self.data.dev, mode, cfg.latent_config(),
                                     cfg.arch, cfg.train_config(alpha), checkpoint_path=path,
                                     meta={"harness": cfg.to_dict(), "alpha": alpha})
            self.log(f"{key}: best epoch {report.best_epoch}/{report.stop_epoch}, "
                     f"dev bound {report.best_dev_bound:.2f}, {time.perf_counter() - tic:.0f}s")
            if self.out_dir is not None:
                report.write(self.out_dir / f"{key}.train.jsonl")
            self._models[key] = ckpt
            self.train_reports[key] = report
        return self._models[key]

    def vae(self) -> Checkpoint:
        return self._train("vae", "vae")

    def fhvae(self, alpha: float) -> Checkpoint:
        return self._train(f"fhvae_a{alpha:g}", "fhvae", alpha)

    def report(self, modes=("raw", "z", "z1", "z1mu2"), alpha=10.0):
        ckpts = []
        if "z" in modes:
            ckpts.append(self.vae())
        if {"z1", "z1mu2", "z1z2"} & set(modes):
            ckpts.append(self.fhvae(alpha))
        return invariance_report(self.clean_train, self.tests, ckpts, modes=modes,
                                 seed=self.config.seed, meta={"alpha": alpha})

    def shifted_error(self, alpha: float, mode="z1") -> float:
        r = invariance_report(self.clean_train, {"shifted": self.data.test_shifted},
                              [self.fhvae(alpha)], modes=[mode], seed=self.config.seed)
        return r.errors[mode]["shifted"]

    def spread(self, alpha: float) -> float:
        return svector_spread(self.fhvae(alpha).table)

    def probes(self, alpha: float) -> dict:
        return disentanglement_probes(self.fhvae(alpha), self.clean_train, self.data.test_clean,
                                      seed=self.config.seed)


@dataclass
class SweepResult:
    alphas: list[float]
    shifted_error: list[float]
    clean_error: list[float]
    spread: list[float]

    def to_tsv(self) -> str:
        rows = ["alpha\tclean_error_pct\tshifted_error_pct\tsvector_spread"]
        rows += [f"{a:g}\t{c:.4f}\t{s:.4f}\t{p:.6f}" for a, c, s, p in
                 zip(self.alphas, self.clean_error, self.shifted_error, self.spread)]
        return "\n".join(rows) + "\n"

    def write(self, out_dir, figure=True) -> dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {"tsv": out_dir / "sweep.tsv", "json": out_dir / "sweep.json"}
        paths["tsv"].write_text(self.to_tsv())
        paths["json"].write_text(json.dumps(asdict(self), indent=2) + "\n")
        if figure:
            from .plotting import plot_alpha_sweep

            paths["png"] = out_dir / "sweep.png"
            plot_alpha_sweep(self.alphas, self.shifted_error, self.spread, paths["png"])
        return paths


def sweep_alpha(harness: Harness, alphas: Sequence[float]) -> SweepResult:
    clean, shifted, spread = [], [], []
    for a in alphas:
        r = invariance_report(harness.clean_train, harness.tests, [harness.fhvae(a)],
                              modes=["z1"], seed=harness.config.seed)
        clean.append(r.errors["z1"]["clean"])
        shifted.append(r.errors["z1"]["shifted"])
        spread.append(harness.spread(a))
    return SweepResult([float(a) for a in alphas], shifted, clean, spread)


def save_models(harness: Harness, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for key, ckpt in harness._models.items():
        save_checkpoint(out_dir / f"{key}.ckpt", ckpt)


def acceptance_config(seed: int = 0) -> HarnessConfig:
    """Desk-scale settings used by the acceptance suite."""
    spec = SyntheticSpec(min_frames=100, max_frames=300, seed=seed)
    return HarnessConfig(spec=spec, latent=dict(dim_z1=8, dim_z2=8, dim_z_vae=16),
                         max_epochs=400, patience_epochs=50, seed=seed)
