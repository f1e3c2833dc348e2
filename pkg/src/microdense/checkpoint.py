"""Versioned binary checkpoints.

Layout::

    b"MDNW" | uint32 version | uint32 manifest_len | manifest (UTF-8 JSON) | blob

The manifest holds the originating architecture config, free-form metadata
and one entry per stored array: ``{"name", "kind", "shape", "offset"}``, with
``offset`` in bytes from the start of the blob. Arrays are little-endian
float32; kinds are ``param``, ``buffer`` (batch-norm running statistics) and
``momentum`` (optimizer state). All integers are little-endian.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

MAGIC = b"MDNW"
VERSION = 1
_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, net, meta: Optional[dict] = None, include_momentum: bool = True) -> None:
    """Write parameters, running statistics and (optionally) momentum buffers."""
    arrays: list[tuple[str, str, np.ndarray]] = []
    for name, p in net.params.items():
        arrays.append((name, "param", p.data))
    for name, value in net.buffers().items():
        arrays.append((name, "buffer", value))
    if include_momentum:
        for name, p in net.params.items():
            arrays.append((name, "momentum", p.momentum))

    entries, chunks, offset = [], [], 0
    for name, kind, arr in arrays:
        data = np.ascontiguousarray(arr, dtype=_F32).tobytes()
        entries.append({"name": name, "kind": kind, "shape": list(arr.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    config = net.config.to_dict() if hasattr(net.config, "to_dict") else dict(net.config)
    manifest = {
        "builder": net.kind,
        "config": config,
        "dtype": net.dtype.name,
        "meta": meta or {},
        "entries": entries,
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(header)))
        f.write(header)
        for c in chunks:
            f.write(c)
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict, dict[tuple[str, str], np.ndarray]]:
    """Parse a checkpoint into (manifest, {(kind, name): float32 array})."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    if len(raw) < 12 + hlen:
        raise CheckpointError(f"{path}: manifest truncated ({len(raw) - 12} of {hlen} bytes)")
    try:
        manifest = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt manifest ({e})") from e
    blob = memoryview(raw)[12 + hlen :]
    arrays = {}
    for e in manifest["entries"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        end = e["offset"] + 4 * count
        if end > len(blob):
            raise CheckpointError(f"{path}: entry {e['name']} runs past end of file")
        arr = np.frombuffer(blob[e["offset"] : end], dtype=_F32).reshape(e["shape"])
        arrays[(e["kind"], e["name"])] = arr.copy()
    return manifest, arrays


def load_into(net, manifest: dict, arrays: dict) -> None:
    """Copy stored arrays into an already-built network of matching shape."""
    for name, p in net.params.items():
        key = ("param", name)
        if key not in arrays:
            raise CheckpointError(f"checkpoint lacks parameter {name}")
        if arrays[key].shape != p.shape:
            raise CheckpointError(f"{name}: checkpoint shape {arrays[key].shape} != {p.shape}")
        p.data[...] = arrays[key]
        mom = arrays.get(("momentum", name))
        p.momentum = np.zeros_like(p.data) if mom is None else mom.astype(p.dtype)
    for name in net.buffers():
        key = ("buffer", name)
        if key not in arrays:
            raise CheckpointError(f"checkpoint lacks buffer {name}")
        net.set_buffer(name, arrays[key])


def load_checkpoint(path, dtype=None):
    """Rebuild the network recorded in a checkpoint and load its state.

    Returns ``(net, meta)``.
    """
    from .ablation import AblationSpec, build_ablation_network
    from .network import build_network
    from .planner import ArchConfig

    manifest, arrays = read_checkpoint(path)
    dtype = dtype or manifest.get("dtype", "float32")
    if manifest["builder"] == "micro-dense":
        net = build_network(ArchConfig.from_dict(manifest["config"]), dtype=dtype)
    else:
        net = build_ablation_network(AblationSpec.from_dict(manifest["config"]), dtype=dtype)
    load_into(net, manifest, arrays)
    return net, manifest["meta"]
