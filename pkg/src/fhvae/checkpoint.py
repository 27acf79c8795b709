"""Binary checkpoint container.

Layout: ``b"FHCK"``, u32 version, u32 header length, UTF-8 JSON header
(sorted keys), then the raw little-endian tensor payloads in header order.
Saving a loaded checkpoint reproduces the original bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError
from .model import FHVAE, VAE, ArchConfig, LatentConfig, SVectorTable

MAGIC = b"FHCK"
VERSION = 1

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class Checkpoint:
    model: FHVAE | VAE
    table: SVectorTable | None = None
    seq_label: str = "uttid"
    utt_to_row: dict[str, int] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def mode(self) -> str:
        return self.model.mode

    def row_for(self, utt_id: str):
        """Table row for a training utterance, or None for unseen ones."""
        return self.utt_to_row.get(utt_id)


def _tensors(ckpt: Checkpoint):
    out = [(f"model.{k}", v) for k, v in ckpt.model.state_dict().items()]
    if ckpt.table is not None:
        out.append(("table.weight", ckpt.table.weight.detach()))
    return out


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    entries, blobs, offset = [], [], 0
    for name, t in _tensors(ckpt):
        arr = t.detach().cpu().contiguous().numpy()
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise ValueError(f"unsupported tensor dtype {dtype} for {name}")
        blob = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append([name, dtype, list(arr.shape), offset, len(blob)])
        blobs.append(blob)
        offset += len(blob)
    header = {
        "mode": ckpt.mode,
        "latent": ckpt.model.latent.to_dict(),
        "arch": ckpt.model.arch.to_dict(),
        "seq_ids": ckpt.table.seq_ids if ckpt.table is not None else None,
        "seq_label": ckpt.seq_label,
        "utt_to_row": ckpt.utt_to_row,
        "meta": ckpt.meta,
        "tensors": entries,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(hbytes)))
        f.write(hbytes)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    if len(data) < 12:
        raise FormatError("truncated checkpoint header", len(data))
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    if len(data) < 12 + hlen:
        raise FormatError("truncated checkpoint header", len(data))
    try:
        header = json.loads(data[12 : 12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable checkpoint header: {exc}", 12) from None
    base = 12 + hlen

    latent = LatentConfig(**header["latent"])
    arch = ArchConfig(**header["arch"])
    model = FHVAE(latent, arch) if header["mode"] == "fhvae" else VAE(latent, arch)
    table = None
    if header["seq_ids"] is not None:
        table = SVectorTable(header["seq_ids"], latent.dim_z2)

    state = {}
    for name, dtype, shape, offset, nbytes in header["tensors"]:
        start = base + offset
        if start + nbytes > len(data):
            raise FormatError(f"truncated tensor {name}", len(data))
        arr = np.frombuffer(data, dtype=np.dtype(dtype).newbyteorder("<"),
                            count=nbytes // np.dtype(dtype).itemsize, offset=start)
        state[name] = torch.from_numpy(arr.astype(dtype).reshape(shape))

    dtype = next(iter(state.values())).dtype if state else torch.float32
    model.to(dtype)
    model.load_state_dict({k[len("model."):]: v for k, v in state.items() if k.startswith("model.")})
    if table is not None:
        table.to(dtype)
        with torch.no_grad():
            table.weight.copy_(state["table.weight"])
    return Checkpoint(
        model=model,
        table=table,
        seq_label=header["seq_label"],
        utt_to_row={k: int(v) for k, v in header["utt_to_row"].items()},
        meta=header["meta"],
    )
