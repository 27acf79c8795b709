"""Command-line entry point: ``fhvae <subcommand> [options]``.

Settings resolve in three layers: built-in defaults, then a JSON config file
(``--config``), then explicit flags. Every output directory receives the
resolved settings as ``config.json``. Exit codes: 0 success, 1 failure,
2 usage error (raised before anything is written).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
DATA_ROOT_ENV = "FHVAE_DATA_ROOT"
FEATURES = ("z1", "z", "z1z2", "z1mu2")
REPORT_MODES = ("raw", "z", "z1", "z1mu2", "z1z2")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _data_root() -> Path:
    return Path(os.environ.get(DATA_ROOT_ENV, "data"))


def _csv(kind):
    def parse(text):
        try:
            return [kind(v) for v in text.split(",") if v.strip()]
        except ValueError as e:
            raise argparse.ArgumentTypeError(str(e)) from None
    return parse


# option tables: name -> (type, default, help); shared between subcommands
SPEC_OPTS = {
    "n_speakers": (int, 4, "speakers"),
    "n_noise_types": (int, 3, "tilts per domain"),
    "n_utts_per_speaker": (int, 50, "training utterances per speaker"),
    "n_dev_per_speaker": (int, 5, "dev utterances per speaker"),
    "n_test_per_speaker": (int, 10, "test utterances per speaker and domain"),
    "min_frames": (int, 60, "shortest utterance"),
    "max_frames": (int, 120, "longest utterance"),
    "dim": (int, 20, "frame dimension D"),
    "width": (int, 20, "segment length W"),
    "n_classes": (int, 8, "segment classes"),
    "offset_scale": (float, 3.0, "shifted tilt magnitude"),
    "noise_std": (float, 0.3, "frame noise std"),
    "shifted_fraction": (float, 0.5, "shifted share of train/dev"),
}
LATENT_OPTS = {
    "dim_z1": (int, 32, None), "dim_z2": (int, 32, None), "dim_z_vae": (int, 64, None),
    "var_z1": (float, 1.0, None), "var_z2": (float, 0.25, None), "var_mu2": (float, 1.0, None),
    "width": (int, 20, "segment length W"),
}
ARCH_OPTS = {"layers": (int, 1, None), "units": (int, 64, None), "cell": (str, "lstm", None)}
TRAIN_OPTS = {
    "alpha": (float, 10.0, "discriminative weight"),
    "batch_size": (int, 128, None), "lr": (float, 1e-3, None),
    "max_epochs": (int, 1000, None), "patience": (int, 50, "early-stopping patience (epochs)"),
}


def _add(p, table, defaults, choices=None):
    for name, (kind, default, help_) in table.items():
        flag = "--" + name.replace("_", "-")
        kw = {"choices": choices[name]} if choices and name in choices else {}
        p.add_argument(flag, dest=name, type=kind, help=help_, **kw)
        defaults[name] = default


def build_parser():
    """Returns the parser and per-subcommand default tables.

    argparse defaults are suppressed so that explicitly given flags can be
    told apart from defaults when merging with a config file.
    """
    parser = _Parser(prog="fhvae", description=__doc__.splitlines()[0],
                     argument_default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    defaults = {}

    def command(name, help_):
        p = sub.add_parser(name, help=help_, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", type=Path, help="JSON file of option values")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        defaults[name] = {"seed": 0, "out": None, "verbose": False}
        return p, defaults[name]

    p, d = command("datagen", "write the synthetic corpus as archives and manifests")
    _add(p, SPEC_OPTS, d)
    d["out"] = None  # falls back to the data root

    p, d = command("train", "train an FHVAE or VAE on a manifest")
    p.add_argument("--train", type=Path, help="training manifest (default: <data>/train.tsv)")
    p.add_argument("--dev", type=Path, help="dev manifest (default: <data>/dev.tsv)")
    p.add_argument("--mode", choices=("fhvae", "vae"))
    p.add_argument("--seq-label", dest="seq_label", choices=("uttid", "speaker", "noise"))
    d.update(train=None, dev=None, mode="fhvae", seq_label="uttid")
    _add(p, LATENT_OPTS, d)
    _add(p, ARCH_OPTS, d, {"cell": ("lstm", "ff")})
    _add(p, TRAIN_OPTS, d)

    p, d = command("extract", "write frame-aligned latent features to an archive")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--feature", choices=FEATURES)
    d.update(checkpoint=None, manifest=None, feature="z1")

    p, d = command("eval-invariance", "segment-class probe error per feature and condition")
    p.add_argument("--train", type=Path, help="probe training manifest (default: <data>/train.tsv)")
    p.add_argument("--train-domain", dest="train_domain",
                   help="keep only this domain of the probe training set ('' keeps all)")
    p.add_argument("--test", action="append", metavar="NAME=MANIFEST",
                   help="test condition (repeatable; default clean and shifted from <data>)")
    p.add_argument("--checkpoint", action="append", type=Path, help="repeatable")
    p.add_argument("--modes", type=_csv(str))
    d.update(train=None, train_domain="clean", test=None, checkpoint=[], modes=None)

    p, d = command("eval-collapse", "s-vector spread of an FHVAE checkpoint")
    p.add_argument("--checkpoint", type=Path)
    d.update(checkpoint=None)

    p, d = command("sweep-alpha", "train one FHVAE per alpha and compare shifted-domain error")
    p.add_argument("--data", type=Path, help="datagen output directory (default: data root)")
    p.add_argument("--alphas", type=_csv(float))
    p.add_argument("--seq-label", dest="seq_label", choices=("uttid", "speaker", "noise"))
    d.update(data=None, alphas=[0.0, 10.0, 20.0], seq_label="uttid")
    _add(p, LATENT_OPTS, d)
    _add(p, ARCH_OPTS, d, {"cell": ("lstm", "ff")})
    _add(p, {k: v for k, v in TRAIN_OPTS.items() if k != "alpha"}, d)
    return parser, defaults


# --------------------------------------------------------------------------
# resolution and validation (no side effects)


def resolve(argv):
    parser, defaults = build_parser()
    if not argv:
        raise UsageError("no subcommand given; try --help")
    ns = parser.parse_args(argv)
    if getattr(ns, "command", None) is None:
        raise UsageError("no subcommand given")
    given = {k: v for k, v in vars(ns).items() if k not in ("command", "config")}
    cfg = dict(defaults[ns.command])
    if getattr(ns, "config", None) is not None:
        try:
            from_file = json.loads(Path(ns.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {ns.config}: {e}") from None
        if not isinstance(from_file, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(from_file) - set(cfg))
        if unknown:
            raise UsageError(f"unknown config key(s) for {ns.command}: {', '.join(unknown)}")
        cfg.update(from_file)
    cfg.update(given)
    for k in ("out", "train", "dev", "checkpoint", "manifest", "data"):
        if isinstance(cfg.get(k), str):
            cfg[k] = Path(cfg[k])
    _validate(ns.command, cfg)
    return ns.command, cfg


def _pick(cfg, table):
    return {k: cfg[k] for k in table}


def _objects(command, cfg):
    from .data import SyntheticSpec
    from .model import ArchConfig, LatentConfig
    from .trainer import TrainConfig

    out = {}
    if command == "datagen":
        out["spec"] = SyntheticSpec(seed=cfg["seed"], **_pick(cfg, SPEC_OPTS))
    if command in ("train", "sweep-alpha"):
        out["latent"] = dict(_pick(cfg, LATENT_OPTS))
        LatentConfig(input_dim=1, **out["latent"])
        out["arch"] = ArchConfig(**_pick(cfg, ARCH_OPTS))
        out["train"] = TrainConfig(
            alpha=cfg.get("alpha", 0.0), batch_size=cfg["batch_size"], lr=cfg["lr"],
            max_epochs=cfg["max_epochs"], patience_epochs=cfg["patience"], seed=cfg["seed"])
    return out


def _validate(command, cfg):
    try:
        _objects(command, cfg)
    except (ValueError, TypeError) as e:
        raise UsageError(str(e)) from None
    if command == "extract":
        for k in ("checkpoint", "manifest"):
            if cfg[k] is None:
                raise UsageError(f"extract needs --{k}")
    if command == "eval-collapse" and cfg["checkpoint"] is None:
        raise UsageError("eval-collapse needs --checkpoint")
    if command == "eval-invariance":
        for t in cfg["test"] or []:
            if "=" not in t:
                raise UsageError(f"--test expects NAME=MANIFEST, got {t!r}")
        modes = cfg["modes"] or []
        bad = [m for m in modes if m not in REPORT_MODES]
        if bad:
            raise UsageError(f"unknown mode(s): {', '.join(bad)}")
    if command == "sweep-alpha":
        if not cfg["alphas"] or any(a < 0 for a in cfg["alphas"]):
            raise UsageError("--alphas needs a non-empty list of non-negative values")


# --------------------------------------------------------------------------
# subcommands


def _out_dir(cfg, fallback) -> Path:
    out = Path(cfg["out"]) if cfg.get("out") is not None else Path(fallback)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(out: Path, command, cfg):
    doc = dict(cfg, command=command)
    (out / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


def _load(path):
    from .data import load_manifest

    return load_manifest(path)


def cmd_datagen(cfg, objs):
    from .data import generate_synthetic, save_split

    out = _out_dir(cfg, _data_root())
    corpus = generate_synthetic(objs["spec"])
    for name, utts in corpus.splits().items():
        save_split(out, name, utts)
        print(f"{name}: {len(utts)} utterances")
    _echo_config(out, "datagen", cfg)
    return out


def _corpus_and_dev(cfg):
    from .data import group_sequences_by_label

    root = _data_root()
    train = _load(cfg["train"] or root / "train.tsv")
    dev = _load(cfg["dev"] or root / "dev.tsv")
    return group_sequences_by_label(train, cfg["seq_label"]), dev


def cmd_train(cfg, objs):
    from .model import LatentConfig
    from .plotting import plot_training
    from .trainer import train_new

    corpus, dev = _corpus_and_dev(cfg)
    latent = LatentConfig(input_dim=corpus.utterances[0].frames.shape[1], **objs["latent"])
    out = _out_dir(cfg, Path("runs") / f"{cfg['mode']}_a{cfg['alpha']:g}")
    _echo_config(out, "train", cfg)
    ckpt, report = train_new(corpus, dev, cfg["mode"], latent, objs["arch"], objs["train"],
                             checkpoint_path=out / "model.ckpt",
                             meta={"seq_label": cfg["seq_label"]})
    report.write(out / "train.jsonl")
    plot_training(report, out / "train.png")
    print(f"best epoch {report.best_epoch} of {report.stop_epoch}, "
          f"dev bound {report.best_dev_bound:.4f}")
    return out


def cmd_extract(cfg, objs):
    from .checkpoint import load_checkpoint
    from .data import write_archive
    from .extraction import extract_features

    ckpt = load_checkpoint(cfg["checkpoint"])
    utts = _load(cfg["manifest"])
    feats = [(u.utt_id, extract_features(u, ckpt, cfg["feature"])) for u in utts]
    out = _out_dir(cfg, Path(cfg["checkpoint"]).parent)
    path = out / f"{Path(cfg['manifest']).stem}.{cfg['feature']}.farc"
    write_archive(path, feats)
    _echo_config(out, "extract", cfg)
    print(f"{len(feats)} utterances -> {path}")
    return out


def cmd_eval_invariance(cfg, objs):
    from .checkpoint import load_checkpoint
    from .eval import invariance_report

    root = _data_root()
    train = _load(cfg["train"] or root / "train.tsv")
    if cfg["train_domain"]:
        train = [u for u in train if u.labels.get("domain") == cfg["train_domain"]]
    tests = dict(t.split("=", 1) for t in cfg["test"] or [])
    if not tests:
        tests = {"clean": root / "test_clean.tsv", "shifted": root / "test_shifted.tsv"}
    tests = {name: _load(p) for name, p in tests.items()}
    ckpts = [load_checkpoint(p) for p in cfg["checkpoint"]]
    modes = cfg["modes"]
    if modes is None:
        have = {c.mode for c in ckpts}
        modes = ["raw"] + (["z"] if "vae" in have else []) + (["z1", "z1mu2"] if "fhvae" in have else [])
    report = invariance_report(train, tests, ckpts, modes=modes, seed=cfg["seed"])
    out = _out_dir(cfg, "reports")
    report.write(out)
    _echo_config(out, "eval-invariance", cfg)
    print(report.to_text(), end="")
    return out


def cmd_eval_collapse(cfg, objs):
    from .checkpoint import load_checkpoint
    from .errors import ModeError
    from .eval import svector_spread

    ckpt = load_checkpoint(cfg["checkpoint"])
    if ckpt.table is None:
        raise ModeError("checkpoint has no s-vector table (VAE model?)")
    spread = svector_spread(ckpt.table)
    out = _out_dir(cfg, Path(cfg["checkpoint"]).parent)
    (out / "collapse.json").write_text(json.dumps(
        {"checkpoint": str(cfg["checkpoint"]), "svector_spread": spread,
         "rows": len(ckpt.table)}, indent=2) + "\n")
    _echo_config(out, "eval-collapse", cfg)
    print(f"svector_spread\t{spread:.6f}")
    return out


def cmd_sweep_alpha(cfg, objs):
    from .data import SyntheticCorpus
    from .harness import Harness, HarnessConfig, sweep_alpha

    root = cfg["data"] or _data_root()
    data = SyntheticCorpus(*(_load(root / f"{s}.tsv")
                             for s in ("train", "dev", "test_clean", "test_shifted")), factors={})
    out = _out_dir(cfg, "sweep")
    _echo_config(out, "sweep-alpha", cfg)
    dim = data.train[0].frames.shape[1]
    hc = HarnessConfig(latent=dict(objs["latent"], input_dim=dim), arch=objs["arch"],
                       max_epochs=cfg["max_epochs"], patience_epochs=cfg["patience"],
                       seq_label=cfg["seq_label"], seed=cfg["seed"])
    harness = Harness(hc, out_dir=out, data=data, log=print)
    result = sweep_alpha(harness, cfg["alphas"])
    result.write(out)
    print(result.to_tsv(), end="")
    return out


COMMANDS = {"datagen": cmd_datagen, "train": cmd_train, "extract": cmd_extract,
            "eval-invariance": cmd_eval_invariance, "eval-collapse": cmd_eval_collapse,
            "sweep-alpha": cmd_sweep_alpha}


def dispatch(argv) -> int:
    try:
        command, cfg = resolve(list(argv))
        objs = _objects(command, cfg)
    except UsageError as e:
        print(f"fhvae: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if cfg.get("verbose") else logging.WARNING,
                        format="%(message)s")
    import torch

    torch.manual_seed(cfg["seed"])
    np.random.seed(cfg["seed"])
    try:
        COMMANDS[command](cfg, objs)
    except Exception as e:  # one-line diagnostic, no traceback
        msg = " ".join(str(e).split()) or type(e).__name__
        print(f"fhvae: error: {type(e).__name__}: {msg}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def main(argv=None) -> int:
    try:
        return dispatch(sys.argv[1:] if argv is None else argv)
    except SystemExit as e:  # --help
        return int(e.code or 0)


if __name__ == "__main__":
    sys.exit(main())
