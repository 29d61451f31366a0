"""Single-file checkpoint container.

Layout::

    b"VRCK"            4-byte magic
    uint32 LE          format version (1)
    uint64 LE          header length in bytes
    header             UTF-8 JSON: config, seed, parameter manifest
    payload            raw little-endian tensors, back to back

Each manifest entry is ``{"name", "shape", "offset", "dtype"}`` with the
offset counted from the start of the payload.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from . import __version__
from .errors import IngestionError
from .model import ModelConfig, VisionModel, build

MAGIC = b"VRCK"
FORMAT_VERSION = 1


def save_checkpoint(model: VisionModel, path, extra: dict | None = None):
    manifest, blobs, offset = [], [], 0
    for name, p in model.named_parameters():
        arr = np.ascontiguousarray(p.data, dtype=p.data.dtype.newbyteorder("<"))
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "dtype": arr.dtype.str})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "format_version": FORMAT_VERSION,
        "artifact_version": __version__,
        "config": model.config.to_dict(),
        "seed": model.master_seed,
        "parameters": manifest,
        "extra": extra or {},
    }
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)


def read_header(path) -> tuple:
    """Return ``(header_dict, payload_offset)``."""
    try:
        with open(path, "rb") as fh:
            prefix = fh.read(16)
            if len(prefix) < 16 or prefix[:4] != MAGIC:
                raise IngestionError(f"{path}: not a checkpoint (bad magic at byte 0)")
            _, hlen = struct.unpack("<IQ", prefix[4:])
            raw = fh.read(hlen)
    except FileNotFoundError as exc:
        raise IngestionError(f"{path}: no such checkpoint") from exc
    if len(raw) != hlen:
        raise IngestionError(f"{path}: header truncated at byte {16 + len(raw)}")
    return json.loads(raw), 16 + hlen


def load_checkpoint(path) -> VisionModel:
    header, start = read_header(path)
    config = ModelConfig.from_dict(header["config"])
    entries = header["parameters"]
    dtype = np.dtype(entries[0]["dtype"]).newbyteorder("=") if entries else np.float64
    model = build(config, header["seed"], dtype=dtype)
    params = model.parameters()
    with open(path, "rb") as fh:
        fh.seek(start)
        payload = fh.read()
    for e in entries:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = e["offset"] + count * dt.itemsize
        if end > len(payload):
            raise IngestionError(f"{path}: payload truncated at byte {start + len(payload)} (needs {start + end})")
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=e["offset"]).reshape(e["shape"])
        if e["name"] not in params:
            raise IngestionError(f"{path}: unknown parameter {e['name']!r}")
        params[e["name"]].data = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return model
