"""Probe classifiers, matched/mismatched-domain reports and s-vector spread."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint
from .data import Utterance
from .errors import DataError, InputContractError
from .extraction import ExtractionMode, extract_features, nonoverlapping_windows, window_posteriors

CONDITIONS = ("clean", "shifted")
MODES = ("raw", "z", "z1", "z1mu2")


class LogisticProbe:
    """Multinomial logistic regression fit by full-batch accelerated gradient descent.

    Features are standardised with the training statistics. The step size is
    1/L for the smoothness constant L of the L2-regularised mean
    cross-entropy, so the iteration converges without a line search.
    """

    def __init__(self, l2=1e-3, tol=1e-6, max_iter=2000, seed=0):
        self.l2 = l2
        self.tol = tol
        self.max_iter = max_iter
        self.seed = seed

    def _design(self, X):
        Z = (np.asarray(X, dtype=np.float64) - self.mu) / self.sd
        return np.hstack([Z, np.ones((len(Z), 1))])

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        self.classes_, yi = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise InputContractError("probe needs at least two classes in the training set")
        self.mu = X.mean(0)
        sd = X.std(0)
        self.sd = np.where(sd > 1e-12, sd, 1.0)
        A = self._design(X)
        n, K = len(A), len(self.classes_)
        Y = np.eye(K)[yi]
        lipschitz = 0.5 * np.linalg.eigvalsh(A.T @ A / n)[-1] + self.l2
        step = 1.0 / lipschitz
        reg = np.ones((A.shape[1], 1))
        reg[-1] = 0.0  # bias is not penalised

        def grad(W):
            logits = A @ W
            logits -= logits.max(1, keepdims=True)
            P = np.exp(logits)
            P /= P.sum(1, keepdims=True)
            return A.T @ (P - Y) / n + self.l2 * reg * W

        rng = np.random.default_rng(self.seed)
        W = rng.normal(0.0, 0.01, size=(A.shape[1], K))
        V, t = W.copy(), 1.0
        self.n_iter_ = self.max_iter
        for it in range(self.max_iter):
            g = grad(V)
            W_next = V - step * g
            t_next = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
            V = W_next + (t - 1) / t_next * (W_next - W)
            W, t = W_next, t_next
            if np.abs(g).max() < self.tol:
                self.n_iter_ = it + 1
                break
        self.coef_ = W
        return self

    def predict(self, X):
        return self.classes_[np.argmax(self._design(X) @ self.coef_, axis=1)]

    def score(self, X, y):
        return float(np.mean(self.predict(X) == np.asarray(y)))


def probe_accuracy(train_X, train_y, test_X, test_y, seed=0, **kwargs) -> float:
    train_X = np.asarray(train_X)
    test_X = np.asarray(test_X)
    if len(test_X) == 0:
        raise InputContractError("probe test set is empty")
    if train_X.shape[1] != test_X.shape[1]:
        raise InputContractError(
            f"train/test feature dimension mismatch ({train_X.shape[1]} vs {test_X.shape[1]})"
        )
    return LogisticProbe(seed=seed, **kwargs).fit(train_X, train_y).score(test_X, test_y)


def svector_spread(table) -> float:
    """Mean squared distance of s-vector rows from their centroid."""
    rows = table.weight.detach().numpy() if hasattr(table, "weight") else np.asarray(table)
    if rows.ndim != 2 or len(rows) == 0:
        raise InputContractError("s-vector table is empty")
    rows = rows.astype(np.float64)
    return float(np.mean(np.sum((rows - rows.mean(0)) ** 2, axis=1)))


# --------------------------------------------------------------------------
# frame-level domain invariance


def _frame_features(utts: Sequence[Utterance], mode: str, checkpoints: dict) -> np.ndarray:
    if mode == "raw":
        return np.concatenate([u.frames for u in utts])
    emode = ExtractionMode(mode)
    ckpt = checkpoints.get(emode.required_model)
    if ckpt is None:
        raise InputContractError(f"mode {mode!r} needs a {emode.required_model} checkpoint")
    return np.concatenate([extract_features(u, ckpt, emode) for u in utts])


def _frame_labels(utts: Sequence[Utterance]) -> np.ndarray:
    if any(u.segment_classes is None for u in utts):
        raise DataError("per-frame segment labels are required for the invariance report")
    return np.concatenate([u.segment_classes for u in utts])


@dataclass
class InvarianceReport:
    errors: dict[str, dict[str, float]]
    meta: dict = field(default_factory=dict)

    def average(self, mode: str) -> float:
        return float(np.mean(list(self.errors[mode].values())))

    def to_dict(self) -> dict:
        return {"errors": self.errors,
                "average": {m: self.average(m) for m in self.errors},
                "meta": self.meta}

    def to_text(self) -> str:
        conds = list(next(iter(self.errors.values())))
        header = ["feature", "avg"] + conds
        rows = [[m, f"{self.average(m):.2f}"] + [f"{self.errors[m][c]:.2f}" for c in conds]
                for m in self.errors]
        widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
        fmt = lambda r: "  ".join(v.ljust(w) for v, w in zip(r, widths))  # noqa: E731
        return "\n".join([fmt(header)] + [fmt(r) for r in rows]) + "\n"

    def to_tsv(self) -> str:
        lines = ["feature\tcondition\terror_pct"]
        for m, cells in self.errors.items():
            lines += [f"{m}\t{c}\t{e:.4f}" for c, e in cells.items()]
            lines.append(f"{m}\taverage\t{self.average(m):.4f}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir, stem="invariance", figure=True) -> dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {"txt": out_dir / f"{stem}.txt", "tsv": out_dir / f"{stem}.tsv",
                 "json": out_dir / f"{stem}.json"}
        paths["txt"].write_text(self.to_text())
        paths["tsv"].write_text(self.to_tsv())
        paths["json"].write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        if figure:
            from .plotting import plot_invariance

            paths["png"] = out_dir / f"{stem}.png"
            plot_invariance(self, paths["png"])
        return paths


def invariance_report(train: Sequence[Utterance], tests: dict[str, Sequence[Utterance]],
                      checkpoints: Sequence[Checkpoint] = (),
                      modes: Sequence[str] = MODES, seed=0, meta=None) -> InvarianceReport:
    """Segment-class probe error (%) per feature mode and test condition.

    The probe is fit on frames of ``train`` (the clean training data) and
    evaluated on every split in ``tests``.
    """
    checkpoints = {c.mode: c for c in checkpoints}
    y_train = _frame_labels(train)
    y_tests = {c: _frame_labels(u) for c, u in tests.items()}
    errors = {}
    for mode in modes:
        probe = LogisticProbe(seed=seed).fit(_frame_features(train, mode, checkpoints), y_train)
        errors[mode] = {
            c: 100.0 * (1.0 - probe.score(_frame_features(u, mode, checkpoints), y_tests[c]))
            for c, u in tests.items()
        }
    return InvarianceReport(errors, dict(meta or {}, seed=seed))


# --------------------------------------------------------------------------
# segment-level disentanglement


def segment_posteriors(utts: Sequence[Utterance], ckpt: Checkpoint) -> dict:
    """z1/z2 posterior means of the aligned non-overlapping segments, with labels."""
    width = ckpt.model.latent.width
    windows, labels = [], {"speaker": [], "noise": [], "segment_class": []}
    for u in utts:
        w = nonoverlapping_windows(u, width)
        windows.append(w)
        labels["speaker"] += [u.labels.get("speaker")] * len(w)
        labels["noise"] += [u.labels.get("noise")] * len(w)
        if u.segment_classes is not None:
            labels["segment_class"] += list(u.segment_classes[: len(w) * width : width])
    post = window_posteriors(ckpt.model, np.concatenate(windows))
    out = {"z1": post["z1_mean"], "z2": post["z2_mean"]}
    out.update({k: np.asarray(v) for k, v in labels.items()})
    return out


def disentanglement_probes(ckpt: Checkpoint, train: Sequence[Utterance],
                           test: Sequence[Utterance], seed=0,
                           targets=("speaker", "noise", "segment_class")) -> dict:
    """Accuracy of probes on per-segment z1 and z2 means for each label."""
    tr = segment_posteriors(train, ckpt)
    te = segment_posteriors(test, ckpt)
    return {t: {z: probe_accuracy(tr[z], tr[t], te[z], te[t], seed=seed) for z in ("z1", "z2")}
            for t in targets}
