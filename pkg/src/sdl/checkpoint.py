"""Checkpoint directory: ``manifest.json`` + one little-endian float64 blob.

The manifest lists every tensor as ``{name, shape, offset}`` where ``offset``
is a byte offset into ``params.bin``; tensors are stored row-major and
back-to-back in manifest order. A SHA-256 of the blob guards against
truncation or bit rot.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from sdl.errors import CheckpointCorrupt

FORMAT = "sdl-ckpt-1"
BLOB = "params.bin"
MANIFEST = "manifest.json"


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        raw = np.ascontiguousarray(a).tobytes()
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    (root / BLOB).write_bytes(blob)
    manifest = {
        "format": FORMAT,
        "blob": BLOB,
        "nbytes": len(blob),
        "sha256": hashlib.sha256(blob).hexdigest(),
        "tensors": entries,
        "meta": meta or {},
    }
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    root = Path(path)
    try:
        manifest = json.loads((root / MANIFEST).read_text())
        blob = (root / manifest.get("blob", BLOB)).read_bytes()
    except (OSError, ValueError) as exc:
        raise CheckpointCorrupt(f"{root}: unreadable checkpoint ({exc})") from exc
    if manifest.get("format") != FORMAT:
        raise CheckpointCorrupt(f"{root}: unknown format {manifest.get('format')!r}")
    if len(blob) != manifest.get("nbytes") or hashlib.sha256(blob).hexdigest() != manifest.get("sha256"):
        raise CheckpointCorrupt(f"{root}: blob checksum mismatch")
    out: dict[str, np.ndarray] = {}
    for e in manifest["tensors"]:
        shape = tuple(e["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = e["offset"] + 8 * count
        if end > len(blob):
            raise CheckpointCorrupt(f"{root}: tensor {e['name']} runs past the blob")
        out[e["name"]] = np.frombuffer(blob, dtype="<f8", count=count, offset=e["offset"]).reshape(shape).astype(np.float64)
    return out, manifest.get("meta", {})
