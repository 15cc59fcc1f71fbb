"""Binary checkpoint container for named float64 tensors plus router state.

Layout (little endian)::

    magic  b"MOELABCK"
    u32    format version
    u64    header length H
    H      UTF-8 JSON header: {"tensors": [{"name", "shape", "offset", "nbytes", "crc32"}, ...],
                               "router": {layer: {"gamma", "lam", "kappa", "beta"}}, "meta": {...}}
    ...    tensor payloads, back to back, each raw float64

Router bias/momentum vectors are stored as tensors named
``router.<layer>.bias`` and ``router.<layer>.momentum``. Offsets are absolute
file positions, so corruption is reported with the byte offset where the bad
payload starts.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .moe import RouterState

MAGIC = b"MOELABCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(
    path: str | Path,
    params: dict[str, np.ndarray],
    states: dict[int, RouterState] | None = None,
    meta: dict | None = None,
) -> None:
    tensors = dict(params)
    router = {}
    for layer, st in (states or {}).items():
        tensors[f"router.{layer}.bias"] = st.bias
        tensors[f"router.{layer}.momentum"] = st.momentum
        router[str(layer)] = {"gamma": st.gamma, "lam": st.lam, "kappa": st.kappa, "beta": st.beta}

    blobs = []
    entries = []
    rel = 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append(
            {"name": name, "shape": list(np.shape(arr)), "offset": rel, "nbytes": len(raw),
             "crc32": zlib.crc32(raw)}
        )
        blobs.append(raw)
        rel += len(raw)

    def encode_header(base: int) -> bytes:
        shifted = [dict(e, offset=e["offset"] + base) for e in entries]
        return json.dumps({"tensors": shifted, "router": router, "meta": meta or {}}, sort_keys=True).encode()

    prefix = len(MAGIC) + 4 + 8
    # offsets depend on header length; iterate until the encoding is stable
    header = encode_header(0)
    while True:
        nxt = encode_header(prefix + len(header))
        if len(nxt) == len(header):
            header = nxt
            break
        header = nxt
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[int, RouterState], dict]:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic at offset 0")
    if len(data) < len(MAGIC) + 12:
        raise CheckpointError(f"{path}: truncated preamble at offset {len(MAGIC)}")
    version, hlen = struct.unpack_from("<IQ", data, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} at offset {len(MAGIC)}")
    hstart = len(MAGIC) + 12
    try:
        header = json.loads(data[hstart : hstart + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header at offset {hstart}: {exc}") from None

    tensors = {}
    for e in header["tensors"]:
        off, n = e["offset"], e["nbytes"]
        raw = data[off : off + n]
        if len(raw) != n:
            raise CheckpointError(f"{path}: tensor {e['name']!r} truncated at offset {off}")
        if zlib.crc32(raw) != e["crc32"]:
            raise CheckpointError(f"{path}: checksum mismatch in tensor {e['name']!r} at offset {off}")
        tensors[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).astype(np.float64)

    states = {}
    for layer, hp in header["router"].items():
        bias = tensors.pop(f"router.{layer}.bias")
        mom = tensors.pop(f"router.{layer}.momentum")
        states[int(layer)] = RouterState(bias, mom, **hp)
    return tensors, states, header.get("meta", {})
