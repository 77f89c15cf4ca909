"""Full Mem-RPE model: observation encoders, a memory family, query encoder,
pose decoder and masked-chunk decoder.  Also checkpoint persistence."""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from kinaema.decoders import ChainedRPEDecoder, MIMDecoder, QueryEncoder, RPEDecoder
from kinaema.engine.nn import Module
from kinaema.engine.tensor import Tensor, as_tensor
from kinaema.errors import ChecksumError, ConfigError, LoadError, TruncatedFileError, VersionMismatchError
from kinaema.memory import MemoryState, ModelSpec, ObservationEncoder, build_memory, detach_state
from kinaema.seeding import rng_for

CHECKPOINT_VERSION = 1


class MemRPEModel(Module):
    def __init__(self, spec: ModelSpec):
        spec.validate()
        self.spec = spec
        # one stream per component, so resizing one part leaves the others' init unchanged
        self.encoder = ObservationEncoder(spec, rng_for(spec.seed, "init", "encoder"))
        self.memory = build_memory(spec, rng_for(spec.seed, "init", "memory"))
        dim, kv = spec.read_dim, spec.token_dim
        self.query_encoder = QueryEncoder(spec.retina_dim, spec.query_chunks, dim,
                                          rng_for(spec.seed, "init", "query"))
        dec_rng = rng_for(spec.seed, "init", "decoder")
        if spec.decoder_kind == "single":
            self.rpe = RPEDecoder(dim, kv, spec.decoder_heads, spec.decoder_blocks, dec_rng,
                                  head_hidden=spec.head_hidden)
        else:
            self.rpe = ChainedRPEDecoder(dim, kv, spec.decoder_heads, spec.decoder_chains, dec_rng,
                                         head_hidden=spec.head_hidden, mlp_factor=spec.chained_mlp_factor)
        self.mim = None
        if spec.use_mim:
            depth = spec.decoder_blocks if spec.decoder_kind == "single" else spec.decoder_chains
            factor = 4 if spec.decoder_kind == "single" else spec.chained_mlp_factor
            self.mim = MIMDecoder(spec.decoder_kind, dim, kv, spec.decoder_heads, depth,
                                  self.query_encoder.chunk_size, rng_for(spec.seed, "init", "mim"),
                                  mlp_factor=factor)

    # -- memory side --------------------------------------------------------
    def init_state(self, batch: int) -> MemoryState:
        return self.memory.init_state(batch)

    def observe(self, state: MemoryState, retina, odometry) -> MemoryState:
        x = self.encoder.encode_obs(as_tensor(retina))
        u = self.encoder.encode_odo(as_tensor(odometry))
        return self.memory.update(state, x, u)

    def rollout(self, retinas: np.ndarray, odometry: np.ndarray, bptt_window: int | None = None,
                state: MemoryState | None = None) -> MemoryState:
        """Fold (B, T, R) retinas and (B, T, 4) odometry into memory.

        With ``bptt_window`` set, gradients only flow through the last
        ``bptt_window`` updates.
        """
        b, t = retinas.shape[:2]
        state = self.init_state(b) if state is None else state
        for i in range(t):
            if bptt_window is not None and i == t - bptt_window:
                state = detach_state(state)
            state = self.observe(state, retinas[:, i], odometry[:, i])
        return state

    def read(self, state: MemoryState) -> Tensor:
        return self.memory.read(state)

    # -- query side ---------------------------------------------------------
    def predict(self, y: Tensor, query_retinas) -> Tensor:
        """Pose 5-vectors for query retinas of shape (B, Q, R)."""
        return self.rpe(y, self.query_encoder(as_tensor(query_retinas)))

    def reconstruct(self, y: Tensor, query_retinas, mask: np.ndarray) -> Tensor:
        if self.mim is None:
            raise ConfigError("model was built without the masked-chunk decoder")
        tokens = self.query_encoder(as_tensor(query_retinas), mask=mask)
        return self.mim(y, tokens, mask)

    def component_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for name, p in self.named_parameters():
            key = ".".join(name.split(".")[:2])
            counts[key] = counts.get(key, 0) + p.size
        return counts


def build_model(spec: ModelSpec) -> MemRPEModel:
    return MemRPEModel(spec)


# -- checkpoints ----------------------------------------------------------------

def _write_arrays(path: Path, arrays: dict[str, np.ndarray]) -> list[dict]:
    index = []
    offset = 0
    with open(path, "wb") as fh:
        for name in sorted(arrays):
            payload = np.ascontiguousarray(arrays[name], dtype="<f4").tobytes()
            fh.write(payload)
            index.append({"name": name, "shape": list(arrays[name].shape), "offset": offset,
                          "nbytes": len(payload), "sha256": hashlib.sha256(payload).hexdigest()})
            offset += len(payload)
    return index


def _read_arrays(path: Path, index: list[dict]) -> dict[str, np.ndarray]:
    try:
        blob = path.read_bytes()
    except FileNotFoundError as exc:
        raise LoadError(f"missing {path}") from exc
    out = {}
    for entry in index:
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(blob):
            raise TruncatedFileError(f"{path.name}: parameter {entry['name']} extends past end of file")
        payload = blob[start:start + n]
        if hashlib.sha256(payload).hexdigest() != entry["sha256"]:
            raise ChecksumError(f"{path.name}: checksum mismatch for parameter {entry['name']}")
        out[entry["name"]] = np.frombuffer(payload, "<f4").reshape(entry["shape"]).astype(np.float32)
    return out


def save_checkpoint(directory, model: MemRPEModel, step: int = 0, optimizer_state: dict | None = None,
                    extra: dict | None = None) -> Path:
    """Write ``checkpoint.json`` + ``weights.bin`` (+ ``optimizer.bin`` when given)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    weights = {name: p.data for name, p in model.named_parameters()}
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "model_spec": model.spec.to_dict(),
        "step": step,
        "weights": _write_arrays(directory / "weights.bin", weights),
        "extra": extra or {},
    }
    if optimizer_state is not None:
        arrays = {f"m/{k}": v for k, v in optimizer_state["m"].items()}
        arrays.update({f"v/{k}": v for k, v in optimizer_state["v"].items()})
        meta["optimizer"] = {
            "type": "adamw",
            "t": optimizer_state["t"],
            "hyper": optimizer_state.get("hyper", {}),
            "arrays": _write_arrays(directory / "optimizer.bin", arrays),
        }
    tmp = directory / "checkpoint.json.tmp"
    tmp.write_text(json.dumps(meta, indent=1, sort_keys=True))
    os.replace(tmp, directory / "checkpoint.json")
    return directory


def load_checkpoint(directory, expect_spec: ModelSpec | None = None) -> tuple[MemRPEModel, dict]:
    directory = Path(directory)
    try:
        meta = json.loads((directory / "checkpoint.json").read_text())
    except FileNotFoundError as exc:
        raise LoadError(f"no checkpoint.json in {directory}") from exc
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"checkpoint format_version {meta.get('format_version')!r}")
    spec = ModelSpec.from_dict(meta["model_spec"])
    if expect_spec is not None and expect_spec.to_dict() != spec.to_dict():
        diff = {k for k, v in spec.to_dict().items() if expect_spec.to_dict().get(k) != v}
        raise ConfigError(f"checkpoint spec differs from the expected spec in {sorted(diff)}")
    model = MemRPEModel(spec)
    weights = _read_arrays(directory / "weights.bin", meta["weights"])
    params = dict(model.named_parameters())
    if set(weights) != set(params):
        raise ConfigError(f"checkpoint parameters do not match the model: "
                          f"{sorted(set(weights) ^ set(params))[:5]}")
    for name, p in params.items():
        if weights[name].shape != p.shape:
            raise ConfigError(f"parameter {name}: checkpoint shape {weights[name].shape} != {p.shape}")
        p.data = weights[name]
    if "optimizer" in meta:
        arrays = _read_arrays(directory / "optimizer.bin", meta["optimizer"]["arrays"])
        meta["optimizer_state"] = {
            "t": meta["optimizer"]["t"],
            "hyper": meta["optimizer"].get("hyper", {}),
            "m": {k[2:]: v for k, v in arrays.items() if k.startswith("m/")},
            "v": {k[2:]: v for k, v in arrays.items() if k.startswith("v/")},
        }
    return model, meta
