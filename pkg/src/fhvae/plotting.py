"""Matplotlib figures for reports. Uses the non-interactive Agg backend."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FEATURE_NAMES = {"raw": "raw frames", "z": "VAE z", "z1": "FHVAE z1", "z1mu2": "z1 + s-vector",
                 "z1z2": "z1 + z2"}


def _style(ax):
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    ax.grid(axis="y", color="gainsboro", linewidth=0.8)
    ax.set_axisbelow(True)


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_invariance(report, path):
    modes = list(report.errors)
    conds = list(report.errors[modes[0]])
    x = np.arange(len(modes))
    width = 0.8 / len(conds)
    fig, ax = plt.subplots(figsize=(1.4 * len(modes) + 2, 3.2))
    for k, c in enumerate(conds):
        ax.bar(x + (k - (len(conds) - 1) / 2) * width, [report.errors[m][c] for m in modes],
               width, label=c)
    ax.set_xticks(x, [FEATURE_NAMES.get(m, m) for m in modes])
    ax.set_ylabel("probe error (%)")
    ax.legend(frameon=False)
    _style(ax)
    _save(fig, path)


def plot_alpha_sweep(alphas, shifted_errors, spreads, path):
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(alphas, shifted_errors, "o-", color="C0")
    ax.set_xlabel("alpha")
    ax.set_ylabel("shifted-domain z1 error (%)", color="C0")
    ax2 = ax.twinx()
    ax2.plot(alphas, spreads, "s--", color="C1")
    ax2.set_ylabel("s-vector spread", color="C1")
    _style(ax)
    _save(fig, path)


def plot_training(report, path):
    epochs = [r["epoch"] for r in report.epochs]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(epochs, [r["train_bound"] for r in report.epochs], label="train")
    ax.plot(epochs, [r["dev_bound"] for r in report.epochs], label="dev")
    ax.axvline(report.best_epoch, color="grey", linestyle=":", linewidth=1)
    ax.set_xlabel("epoch")
    ax.set_ylabel("lower bound per segment")
    ax.legend(frameon=False)
    _style(ax)
    _save(fig, path)
