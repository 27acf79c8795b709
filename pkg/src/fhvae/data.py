"""Utterances, FARC feature archives, manifests, sequence grouping and the
synthetic two-domain corpus."""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import DataError, FormatError

ARCHIVE_MAGIC = b"FARC"
ARCHIVE_VERSION = 1
SEQ_LABELS = ("uttid", "speaker", "noise")


@dataclass
class Utterance:
    utt_id: str
    frames: np.ndarray
    labels: dict = field(default_factory=dict)
    segment_classes: np.ndarray | None = None
    # generator-side ground truth, never persisted
    extras: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise DataError(f"utterance {self.utt_id!r}: frames must be a non-empty T x D matrix")
        if not np.isfinite(self.frames).all():
            raise DataError(f"utterance {self.utt_id!r}: non-finite frames")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class Corpus:
    """Utterances plus their assignment to training sequences.

    Several utterances share a sequence (one s-vector row, one pooled
    segment count) when grouped by speaker or noise label.
    """

    utterances: list[Utterance]
    seq_label: str
    seq_ids: list[str]
    seq_of: np.ndarray

    @property
    def num_sequences(self) -> int:
        return len(self.seq_ids)

    def utt_to_row(self) -> dict[str, int]:
        return {u.utt_id: int(s) for u, s in zip(self.utterances, self.seq_of)}

    def seg_counts(self, width: int) -> np.ndarray:
        """Segments scheduled per sequence per epoch (pooled over its utterances)."""
        counts = np.zeros(self.num_sequences, dtype=np.int64)
        for u, s in zip(self.utterances, self.seq_of):
            counts[s] += segments_per_epoch(u.num_frames, width)
        return counts


def segments_per_epoch(num_frames: int, width: int) -> int:
    return max(1, num_frames // width)


def group_sequences_by_label(utterances: Iterable[Utterance], label: str = "uttid") -> Corpus:
    utterances = list(utterances)
    if label not in SEQ_LABELS:
        raise DataError(f"unknown sequence label {label!r}; expected one of {SEQ_LABELS}")
    ids = [u.utt_id for u in utterances]
    if len(set(ids)) != len(ids):
        raise DataError("utterance ids must be unique")
    keys = []
    for u in utterances:
        if label == "uttid":
            keys.append(u.utt_id)
            continue
        value = u.labels.get(label)
        if value in (None, ""):
            raise DataError(f"utterance {u.utt_id!r} has no {label} label")
        keys.append(str(value))
    seq_ids = list(dict.fromkeys(keys))
    index = {s: i for i, s in enumerate(seq_ids)}
    seq_of = np.array([index[k] for k in keys], dtype=np.int64)
    return Corpus(utterances, label, seq_ids, seq_of)


# --------------------------------------------------------------------------
# FARC archives


def write_archive(path, archive: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]) -> None:
    items = list(archive.items()) if isinstance(archive, Mapping) else list(archive)
    ids = [k for k, _ in items]
    if len(set(ids)) != len(ids):
        raise DataError("archive ids must be unique")
    chunks = [ARCHIVE_MAGIC, struct.pack("<II", ARCHIVE_VERSION, len(items))]
    for utt_id, mat in items:
        mat = np.asarray(mat, dtype="<f4")
        if mat.ndim != 2:
            raise DataError(f"archive record {utt_id!r} must be a 2-D matrix")
        key = utt_id.encode("utf-8")
        chunks.append(struct.pack("<I", len(key)))
        chunks.append(key)
        chunks.append(struct.pack("<II", *mat.shape))
        chunks.append(np.ascontiguousarray(mat).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_archive(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"truncated archive while reading {what}", pos)
        out = data[pos : pos + n]
        pos += n
        return out

    if take(4, "magic") != ARCHIVE_MAGIC:
        raise FormatError("bad archive magic", 0)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != ARCHIVE_VERSION:
        raise FormatError(f"unsupported archive version {version}", 4)
    out = {}
    for _ in range(count):
        start = pos
        (klen,) = struct.unpack("<I", take(4, "id length"))
        try:
            utt_id = take(klen, "id").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("record id is not valid UTF-8", start + 4) from None
        if utt_id in out:
            raise FormatError(f"duplicate record id {utt_id!r}", start)
        T, D = struct.unpack("<II", take(8, "shape"))
        raw = take(4 * T * D, f"matrix of {utt_id!r}")
        out[utt_id] = np.frombuffer(raw, dtype="<f4").reshape(T, D).astype(np.float32)
    if pos != len(data):
        raise FormatError("trailing bytes after last record", pos)
    return out


# --------------------------------------------------------------------------
# manifests: utt_id, archive path, speaker, noise, domain[, segment-label archive]


def write_manifest(path, rows: Iterable[Mapping[str, str]]) -> None:
    lines = []
    for r in rows:
        cols = [r["utt_id"], str(r["archive"]), r.get("speaker", ""), r.get("noise", ""),
                r.get("domain", "")]
        if r.get("label_archive"):
            cols.append(str(r["label_archive"]))
        if any("\t" in c or "\n" in c for c in cols):
            raise DataError(f"manifest field contains a tab or newline: {cols!r}")
        lines.append("\t".join(cols))
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_manifest(path) -> list[dict]:
    rows = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) not in (5, 6):
            raise DataError(f"{path}:{n}: expected 5 or 6 tab-separated fields, got {len(cols)}")
        row = dict(zip(("utt_id", "archive", "speaker", "noise", "domain"), cols))
        row["label_archive"] = cols[5] if len(cols) == 6 else ""
        rows.append(row)
    return rows


def load_manifest(path) -> list[Utterance]:
    """Read a manifest and the archives it references (paths relative to it)."""
    base = Path(path).parent
    cache: dict[Path, dict] = {}

    def archive(p):
        p = Path(p)
        p = p if p.is_absolute() else base / p
        if p not in cache:
            cache[p] = read_archive(p)
        return cache[p]

    utts = []
    for row in read_manifest(path):
        feats = archive(row["archive"])
        if row["utt_id"] not in feats:
            raise DataError(f"{row['utt_id']!r} missing from archive {row['archive']}")
        classes = None
        if row["label_archive"]:
            classes = archive(row["label_archive"])[row["utt_id"]][:, 0].astype(np.int64)
        labels = {k: row[k] for k in ("speaker", "noise", "domain") if row[k]}
        utts.append(Utterance(row["utt_id"], feats[row["utt_id"]], labels, classes))
    return utts


def save_split(directory, name: str, utterances: list[Utterance]) -> Path:
    """Write ``<name>.farc``, ``<name>.labels.farc`` and ``<name>.tsv`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    feats = f"{name}.farc"
    write_archive(directory / feats, [(u.utt_id, u.frames) for u in utterances])
    has_labels = all(u.segment_classes is not None for u in utterances)
    labels = f"{name}.labels.farc" if has_labels else ""
    if has_labels:
        write_archive(directory / labels, [
            (u.utt_id, u.segment_classes.astype(np.float32)[:, None]) for u in utterances
        ])
    rows = [dict(utt_id=u.utt_id, archive=feats, label_archive=labels, **u.labels) for u in utterances]
    manifest = directory / f"{name}.tsv"
    write_manifest(manifest, rows)
    return manifest


# --------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SyntheticSpec:
    n_speakers: int = 4
    n_noise_types: int = 3
    n_utts_per_speaker: int = 50
    n_dev_per_speaker: int = 5
    n_test_per_speaker: int = 10
    min_frames: int = 60
    max_frames: int = 120
    dim: int = 20
    width: int = 20
    n_classes: int = 8
    class_scale: float = 1.0
    speaker_scale: float = 1.0
    tilt_scale: float = 1.0
    tilt_jitter: float = 0.1
    offset_scale: float = 3.0
    noise_std: float = 0.3
    noise_std_mult: float = 2.0
    shifted_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("n_speakers", "n_noise_types", "n_utts_per_speaker", "width"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be >= 1")
        if self.n_dev_per_speaker < 0 or self.n_test_per_speaker < 0:
            raise DataError("split sizes must be non-negative")
        if self.dim < 4:
            raise DataError("dim must be >= 4")
        if self.n_classes < 2:
            raise DataError("n_classes must be >= 2")
        if self.min_frames < self.width or self.max_frames < self.min_frames:
            raise DataError("need width <= min_frames <= max_frames")
        if self.max_frames // self.width < math.ceil(self.min_frames / self.width):
            raise DataError("frame range admits no whole number of segments")
        if not 0.0 <= self.shifted_fraction <= 1.0:
            raise DataError("shifted_fraction must lie in [0, 1]")
        if self.noise_std < 0 or self.noise_std_mult <= 0:
            raise DataError("noise parameters must be non-negative")

    def to_dict(self):
        return asdict(self)


@dataclass
class SyntheticCorpus:
    train: list[Utterance]
    dev: list[Utterance]
    test_clean: list[Utterance]
    test_shifted: list[Utterance]
    factors: dict

    def splits(self) -> dict[str, list[Utterance]]:
        return {"train": self.train, "dev": self.dev,
                "test_clean": self.test_clean, "test_shifted": self.test_shifted}


def _tilts(spec: SyntheticSpec):
    lin = np.linspace(-1.0, 1.0, spec.dim)
    pos = (np.arange(spec.dim) + 0.5) / spec.dim
    K = spec.n_noise_types
    clean = {f"tilt{k}": spec.tilt_scale * (k + 1) / K * (-1) ** k * lin for k in range(K)}
    # unseen family: offset plus spectral ripple
    shifted = {f"shift{k}": spec.offset_scale * (0.5 + np.cos(np.pi * (k + 1) * pos))
               for k in range(K)}
    return clean, shifted


def generate_synthetic(spec: SyntheticSpec | None = None) -> SyntheticCorpus:
    """Two-domain corpus with sequence-level and segment-level factors.

    Each utterance is a run of W-frame segments. A segment is its class
    template plus the speaker bias (constant per speaker), the utterance's
    spectral tilt (constant per utterance) and i.i.d. frame noise. Shifted
    domain utterances use a separate tilt family and a larger noise level.
    The training split mixes both domains; the test splits are single-domain.
    """
    spec = spec or SyntheticSpec()
    rng = np.random.default_rng(spec.seed)
    W, D, C = spec.width, spec.dim, spec.n_classes

    t = np.arange(W)[:, None]
    env = rng.normal(0.0, spec.class_scale, size=(C, D))
    mod = rng.normal(0.0, 0.5 * spec.class_scale, size=(C, D))
    freq = 1 + np.arange(C) % 2
    phase = rng.uniform(0.0, 2 * np.pi, size=C)
    templates = np.stack([
        env[c] + mod[c] * np.sin(2 * np.pi * freq[c] * t / W + phase[c]) for c in range(C)
    ])
    speaker_bias = rng.normal(0.0, spec.speaker_scale, size=(spec.n_speakers, D))
    clean_tilts, shifted_tilts = _tilts(spec)
    seg_lo = math.ceil(spec.min_frames / W)
    seg_hi = spec.max_frames // W

    def utterance(split, s, j, shifted):
        family = shifted_tilts if shifted else clean_tilts
        noise = list(family)[rng.integers(len(family))]
        n_seg = int(rng.integers(seg_lo, seg_hi + 1))
        classes = rng.integers(C, size=n_seg)
        tilt = family[noise] * (1.0 + spec.tilt_jitter * rng.normal())
        std = spec.noise_std * (spec.noise_std_mult if shifted else 1.0)
        content = templates[classes].reshape(n_seg * W, D)
        bias = np.broadcast_to(speaker_bias[s], content.shape)
        frames = content + bias + tilt + std * rng.normal(size=content.shape)
        return Utterance(
            f"{split}_spk{s}_{j:03d}",
            frames,
            {"speaker": f"spk{s}", "noise": noise, "domain": "shifted" if shifted else "clean"},
            np.repeat(classes, W),
            extras={"speaker_bias": bias, "tilt": np.broadcast_to(tilt, content.shape),
                    "content": content},
        )

    def mixed(split, per_speaker):
        out = []
        n_shift = round(spec.shifted_fraction * per_speaker)
        for s in range(spec.n_speakers):
            flags = np.zeros(per_speaker, dtype=bool)
            flags[rng.permutation(per_speaker)[:n_shift]] = True
            out += [utterance(split, s, j, bool(flags[j])) for j in range(per_speaker)]
        return out

    def single(split, per_speaker, shifted):
        return [utterance(split, s, j, shifted)
                for s in range(spec.n_speakers) for j in range(per_speaker)]

    return SyntheticCorpus(
        train=mixed("train", spec.n_utts_per_speaker),
        dev=mixed("dev", spec.n_dev_per_speaker),
        test_clean=single("testclean", spec.n_test_per_speaker, False),
        test_shifted=single("testshift", spec.n_test_per_speaker, True),
        factors={"templates": templates, "speaker_bias": speaker_bias,
                 "clean_tilts": clean_tilts, "shifted_tilts": shifted_tilts},
    )


def domain_subset(utterances: Iterable[Utterance], domain: str) -> list[Utterance]:
    return [u for u in utterances if u.labels.get("domain") == domain]
