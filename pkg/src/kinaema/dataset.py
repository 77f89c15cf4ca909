"""On-disk episode datasets.

A dataset is a directory holding ``manifest.json`` and ``episodes.bin``.
``episodes.bin`` concatenates, per episode, little-endian float32 arrays in
the order poses[(T+1)x3], retinas[TxR], odometry[Tx4], alt_poses[Tx3],
alt_retinas[TxR].  The manifest indexes episodes by byte offset and carries a
SHA-256 of each episode's bytes.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict
from pathlib import Path

import numpy as np

from kinaema.errors import ChecksumError, LoadError, TruncatedFileError, VersionMismatchError
from kinaema.world import EpisodeRecord, Scene, WorldConfig

FORMAT_VERSION = 1
_FIELDS = ("poses", "retinas", "odometry", "alt_poses", "alt_retinas")
_LE_F32 = np.dtype("<f4")


def _episode_bytes(rec: EpisodeRecord) -> bytes:
    return b"".join(np.ascontiguousarray(getattr(rec, f), dtype=_LE_F32).tobytes() for f in _FIELDS)


def write_dataset(records: list[EpisodeRecord], path, config: WorldConfig | None = None,
                  scenes: list[Scene] | None = None, meta: dict | None = None) -> dict:
    """Write ``records``; float payloads are stored as float32.

    Returns the manifest that was written.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    retina_dim = int(records[0].retinas.shape[1]) if records else (config.retina_dim if config else 0)
    index = []
    offset = 0
    with open(path / "episodes.bin", "wb") as fh:
        for i, rec in enumerate(records):
            payload = _episode_bytes(rec)
            fh.write(payload)
            index.append({
                "index": i,
                "scene_id": rec.scene_id,
                "profile": rec.profile,
                "length": rec.length,
                "offset": offset,
                "nbytes": len(payload),
                "sha256": hashlib.sha256(payload).hexdigest(),
            })
            offset += len(payload)
    manifest = {
        "format_version": FORMAT_VERSION,
        "retina_dim": retina_dim,
        "world": asdict(config) if config else None,
        "scenes": [{"id": s.id, "seed": s.rng_seed} for s in (scenes or [])],
        "episodes": index,
        "meta": meta or {},
    }
    tmp = path / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    os.replace(tmp, path / "manifest.json")
    return manifest


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise LoadError(f"no manifest.json in {path}") from exc
    except json.JSONDecodeError as exc:
        raise TruncatedFileError(f"manifest.json in {path} is not valid JSON: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"dataset format_version {version!r}, expected {FORMAT_VERSION}")
    return manifest


def world_config_of(manifest: dict) -> WorldConfig | None:
    world = manifest.get("world")
    return WorldConfig(**world) if world else None


def read_dataset(path) -> list[EpisodeRecord]:
    path = Path(path)
    manifest = read_manifest(path)
    r = manifest["retina_dim"]
    try:
        blob = (path / "episodes.bin").read_bytes()
    except FileNotFoundError as exc:
        raise LoadError(f"no episodes.bin in {path}") from exc
    records = []
    for ep in manifest["episodes"]:
        start, n = ep["offset"], ep["nbytes"]
        name = f"episode {ep['index']} (scene {ep['scene_id']})"
        if start + n > len(blob):
            raise TruncatedFileError(f"{name}: episodes.bin ends at byte {len(blob)}, need {start + n}")
        payload = blob[start:start + n]
        if hashlib.sha256(payload).hexdigest() != ep["sha256"]:
            raise ChecksumError(f"{name}: checksum mismatch")
        t = ep["length"]
        shapes = [(t + 1, 3), (t, r), (t, 4), (t, 3), (t, r)]
        expected = sum(a * b for a, b in shapes) * 4
        if expected != n:
            raise LoadError(f"{name}: payload is {n} bytes, layout needs {expected}")
        arrays = {}
        pos = 0
        for field, shape in zip(_FIELDS, shapes):
            count = shape[0] * shape[1]
            arrays[field] = np.frombuffer(payload, _LE_F32, count, pos).reshape(shape).astype(np.float32)
            pos += count * 4
        records.append(EpisodeRecord(ep["scene_id"], ep["profile"], **arrays))
    return records
