import json

import numpy as np
import pytest
import torch

from fhvae.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from fhvae.data import SyntheticSpec, Utterance, generate_synthetic, group_sequences_by_label
from fhvae.errors import DataError, FormatError
from fhvae.model import ArchConfig, LatentConfig, SVectorTable, build_model
from fhvae.trainer import (
    EarlyStopping,
    SegmentSource,
    TrainConfig,
    Trainer,
    fit,
    sample_segment_batches,
    schedule_epoch,
    train_new,
)

SPEC = SyntheticSpec(n_speakers=2, n_noise_types=2, n_utts_per_speaker=4, n_dev_per_speaker=1,
                     n_test_per_speaker=1, dim=4, width=5, min_frames=10, max_frames=20,
                     n_classes=3, seed=1)
LAT = LatentConfig(dim_z1=2, dim_z2=2, dim_z_vae=3, width=5, input_dim=4)
ARCH = ArchConfig(units=6)


@pytest.fixture(scope="module")
def synth():
    return generate_synthetic(SPEC)


@pytest.fixture
def corpus(synth):
    return group_sequences_by_label(synth.train, "uttid")


def _flat(model, table=None):
    parts = [p.detach().flatten() for p in model.parameters()]
    if table is not None:
        parts.append(table.weight.detach().flatten())
    return torch.cat(parts)


def test_schedule_counts():
    rng = np.random.default_rng(0)
    utt, start = schedule_epoch(np.array([100]), 20, rng)
    assert len(utt) == 5 and np.all((start >= 0) & (start <= 80))
    utt, start = schedule_epoch(np.array([20]), 20, rng)
    assert list(utt) == [0] and list(start) == [0]
    utt, start = schedule_epoch(np.array([39, 100, 20]), 20, rng)
    assert np.bincount(utt).tolist() == [1, 5, 1]


def test_schedule_is_seeded():
    a = schedule_epoch(np.array([50, 73, 20]), 20, np.random.default_rng(7))
    b = schedule_epoch(np.array([50, 73, 20]), 20, np.random.default_rng(7))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_batches(corpus):
    source = SegmentSource(corpus, 5)
    batches = sample_segment_batches(source, np.random.default_rng(0), 4)
    total = int(corpus.seg_counts(5).sum())
    assert sum(len(b) for b in batches) == total
    assert all(len(b) == 4 for b in batches[:-1]) and 1 <= len(batches[-1]) <= 4
    for b in batches:
        assert b.data.shape[1:] == (5, 4)
        assert torch.equal(b.seq_index, torch.from_numpy(corpus.seq_of[b.utt_index]))
        assert torch.equal(b.seg_count, torch.from_numpy(corpus.seg_counts(5))[b.seq_index])
        for k in range(len(b)):
            u = corpus.utterances[b.utt_index[k]]
            assert np.array_equal(b.data[k].numpy(), u.frames[b.start[k] : b.start[k] + 5])


def test_short_utterance_is_a_data_error():
    corpus = group_sequences_by_label([Utterance("tiny", np.zeros((3, 4)))])
    with pytest.raises(DataError, match="tiny"):
        SegmentSource(corpus, 5)


def _trainer(corpus, **cfg):
    model = build_model("fhvae", LAT, ARCH, seed=0)
    table = SVectorTable(corpus.seq_ids, LAT.dim_z2)
    return Trainer(model, table, TrainConfig(**dict(dict(batch_size=8), **cfg)))


def test_zero_learning_rate_leaves_parameters(corpus):
    tr = _trainer(corpus, lr=0.0)
    before = _flat(tr.model, tr.table)
    batch = sample_segment_batches(SegmentSource(corpus, 5), tr.rng, 8)[0]
    bd = tr.train_step(batch)
    assert torch.isfinite(bd.total)
    assert torch.equal(before, _flat(tr.model, tr.table))


def test_only_referenced_table_rows_move(corpus):
    tr = _trainer(corpus, alpha=10.0)
    batch = sample_segment_batches(SegmentSource(corpus, 5), tr.rng, 3)[0]
    before = tr.table.weight.detach().clone()
    tr.train_step(batch)
    moved = (tr.table.weight.detach() != before).any(1)
    referenced = torch.zeros(len(tr.table), dtype=torch.bool)
    referenced[batch.seq_index] = True
    assert torch.equal(moved, referenced)


def test_adam_zero_gradient_is_a_no_op():
    p = torch.nn.Parameter(torch.tensor([1.0, -2.0]))
    opt = torch.optim.Adam([p], lr=0.1, betas=(0.95, 0.999), eps=1e-8)
    for _ in range(3):
        p.grad = torch.zeros(2)
        opt.step()
    assert torch.equal(p.detach(), torch.tensor([1.0, -2.0]))


def test_overfit_single_batch(corpus):
    tr = _trainer(corpus, alpha=1.0, lr=3e-3)
    batch = sample_segment_batches(SegmentSource(corpus, 5), tr.rng, 16)[0]
    losses = []
    for _ in range(200):
        bd = tr.train_step(batch)
        losses.append(-float(bd.total) + tr.config.l2_weight * 0)  # negative bound
    assert all(b < a for a, b in zip(losses[:10], losses[1:10]))
    assert losses[-1] <= 0.8 * losses[0]


def test_training_is_deterministic(corpus, synth):
    cfg = TrainConfig(batch_size=8, max_epochs=3, seed=4)
    a, ra = train_new(corpus, synth.dev, "fhvae", LAT, ARCH, cfg)
    b, rb = train_new(corpus, synth.dev, "fhvae", LAT, ARCH, cfg)
    assert torch.equal(_flat(a.model, a.table), _flat(b.model, b.table))
    assert ra.epochs == rb.epochs


def test_early_stopping_rule():
    stop = EarlyStopping(patience=1)
    assert stop.update(1, -10.0) and not stop.should_stop
    assert not stop.update(2, -11.0) and stop.should_stop
    stop = EarlyStopping(patience=2)
    for epoch, v in enumerate([-5.0, -4.0, -4.5, -3.0, -3.5, -3.2], 1):
        stop.update(epoch, v)
    assert stop.best == -3.0 and stop.best_epoch == 4 and stop.should_stop


@pytest.mark.parametrize("mode", ["fhvae", "vae"])
def test_fit_report_and_best_checkpoint(tmp_path, corpus, synth, mode):
    cfg = TrainConfig(batch_size=8, max_epochs=6, patience_epochs=50, seed=0, lr=3e-3)
    ckpt, report = train_new(corpus, synth.dev, mode, LAT, ARCH, cfg,
                             checkpoint_path=tmp_path / "m.ckpt")
    dev = [r["dev_bound"] for r in report.epochs]
    assert report.stop_epoch == 6 and len(dev) == 6
    assert report.best_dev_bound == max(dev) >= dev[0]
    assert report.epochs[report.best_epoch - 1]["dev_bound"] == report.best_dev_bound
    assert all(r["dev"]["disc"] == 0.0 for r in report.epochs)
    loaded = load_checkpoint(tmp_path / "m.ckpt")
    assert torch.equal(_flat(loaded.model, loaded.table), _flat(ckpt.model, ckpt.table))
    report.write(tmp_path / "report.jsonl")
    lines = (tmp_path / "report.jsonl").read_text().splitlines()
    assert len(lines) == 7 and json.loads(lines[-1])["summary"]["best_epoch"] == report.best_epoch


def test_fit_restores_best_parameters(corpus, synth):
    from fhvae.trainer import DevEvaluator

    cfg = TrainConfig(batch_size=8, max_epochs=5, seed=2, lr=3e-3)
    ckpt, report = train_new(corpus, synth.dev, "fhvae", LAT, ARCH, cfg)
    again = DevEvaluator(synth.dev, ckpt.model, cfg.seed)(ckpt.model)["total"]
    assert again == pytest.approx(report.best_dev_bound, rel=1e-6)


def test_fit_requires_dev(corpus):
    model = build_model("fhvae", LAT, ARCH)
    with pytest.raises(DataError):
        fit(corpus, [], model, SVectorTable(corpus.seq_ids, 2), TrainConfig(max_epochs=1))


def test_train_config_validation():
    for bad in (dict(batch_size=0), dict(adam_beta1=1.0), dict(patience_epochs=0), dict(alpha=-1)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    cfg = TrainConfig()
    assert (cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps) == (1e-3, 0.95, 0.999, 1e-8)
    assert (cfg.batch_size, cfg.l2_weight, cfg.patience_epochs) == (128, 1e-4, 50)


@pytest.mark.parametrize("mode", ["fhvae", "vae"])
def test_checkpoint_round_trip_is_bit_exact(tmp_path, mode):
    model = build_model(mode, LAT, ArchConfig(units=5, layers=2), seed=3)
    table = None
    if mode == "fhvae":
        table = SVectorTable(["a", "b", "c"], 2)
        with torch.no_grad():
            table.weight.normal_()
    ckpt = Checkpoint(model, table, "speaker", {"u1": 0, "u2": 2}, {"note": "x"})
    save_checkpoint(tmp_path / "a.ckpt", ckpt)
    loaded = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(tmp_path / "b.ckpt", loaded)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert loaded.seq_label == "speaker" and loaded.utt_to_row == {"u1": 0, "u2": 2}
    assert loaded.model.latent == LAT and loaded.model.arch == ArchConfig(units=5, layers=2)
    x = torch.randn(5, 4)
    fwd = (lambda m: m.encode_z2(x).mean) if mode == "fhvae" else (lambda m: m.encode(x).mean)
    assert torch.equal(fwd(model), fwd(loaded.model))


def test_double_precision_checkpoint(tmp_path):
    model = build_model("vae", LAT, ARCH).double()
    save_checkpoint(tmp_path / "d.ckpt", Checkpoint(model))
    loaded = load_checkpoint(tmp_path / "d.ckpt")
    assert next(loaded.model.parameters()).dtype == torch.float64


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "a.ckpt"
    save_checkpoint(p, Checkpoint(build_model("vae", LAT, ARCH)))
    p.write_bytes(b"NOPE" + p.read_bytes()[4:])
    with pytest.raises(FormatError):
        load_checkpoint(p)


def test_row_adam_matches_dense_adam_when_all_rows_selected():
    from fhvae.trainer import RowAdam

    gen = torch.Generator().manual_seed(0)
    a = torch.nn.Parameter(torch.randn(4, 3, generator=gen, dtype=torch.float64))
    b = torch.nn.Parameter(a.detach().clone())
    dense = torch.optim.Adam([a], lr=0.01, betas=(0.95, 0.999), eps=1e-8)
    rows = RowAdam(b, 0.01, (0.95, 0.999), 1e-8)
    for _ in range(5):
        g = torch.randn(4, 3, generator=gen, dtype=torch.float64)
        a.grad, b.grad = g.clone(), g.clone()
        dense.step()
        rows.step(torch.arange(4))
    assert torch.allclose(a, b, rtol=0, atol=1e-12)


def test_row_adam_leaves_other_rows():
    from fhvae.trainer import RowAdam

    p = torch.nn.Parameter(torch.zeros(3, 2))
    opt = RowAdam(p, 0.1, (0.95, 0.999), 1e-8)
    p.grad = torch.ones(3, 2)
    opt.step(torch.tensor([1]))
    assert torch.equal(p[0].detach(), torch.zeros(2)) and torch.equal(p[2].detach(), torch.zeros(2))
    assert torch.allclose(p[1].detach(), torch.full((2,), -0.1))
