"""Supervised Mem-RPE training: randomized sequence lengths, AdamW with a
warmup-cosine schedule, global-norm clipping, validation-based checkpoint
selection and bit-identical resume."""
from __future__ import annotations

import json
import math
import queue
import threading
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from kinaema.decoders import loss_mim, loss_rpe, make_training_queries, sample_mim_mask
from kinaema.engine.tensor import Tensor
from kinaema.errors import ConfigError, InputError, NumericError
from kinaema.evaluation import SELECTION_KEY, eval_rpe
from kinaema.memory import ModelSpec
from kinaema.model import MemRPEModel, build_model, load_checkpoint, save_checkpoint
from kinaema.seeding import rng_for
from kinaema.world import EpisodeRecord

LOG_NAME = "train_log.jsonl"


@dataclass
class TrainConfig:
    batch_size: int = 32
    total_steps: int = 50_000
    t_min: int = 20
    t_max: int = 40
    lr_base: float = 1.5e-4  # scaled by batch_size / 256
    lr_min: float = 1e-8
    warmup_fraction: float = 0.2
    weight_decay: float = 5e-2
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    mim_weight: float = 1.0
    mim_ratio: float = 0.5
    bptt_window: int | None = None
    seed: int = 0
    log_every: int = 10
    val_every: int = 1000
    val_episodes: int = 64
    checkpoint_every: int = 1000
    prefetch: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def lr_max(self) -> float:
        return self.lr_base * self.batch_size / 256

    @property
    def warmup_steps(self) -> int:
        return max(1, int(round(self.warmup_fraction * self.total_steps)))

    def validate(self) -> None:
        if not 1 <= self.t_min <= self.t_max:
            raise ConfigError(f"need 1 <= t_min <= t_max, got {self.t_min}, {self.t_max}")
        if not 0 < self.warmup_fraction < 1:
            raise ConfigError("warmup_fraction must lie in (0, 1)")
        if self.batch_size < 1 or self.total_steps < 1:
            raise ConfigError("batch_size and total_steps must be positive")
        if self.bptt_window is not None and self.bptt_window < 1:
            raise ConfigError("bptt_window must be positive")
        if self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive")


def learning_rate(step: int, config: TrainConfig) -> float:
    """Linear warmup from 0 to lr_max, then cosine decay reaching lr_min at the last step."""
    warm, last = config.warmup_steps, config.total_steps - 1
    if step < warm:
        return config.lr_max * step / warm
    if last <= warm:
        return config.lr_max
    progress = min(1.0, (step - warm) / (last - warm))
    return config.lr_min + 0.5 * (config.lr_max - config.lr_min) * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay applied to every parameter."""

    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.99), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.beta1, self.beta2 = betas
        self.eps, self.weight_decay = eps, weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if lr == 0.0:
                continue
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data * (1.0 - lr * self.weight_decay) - lr * update).astype(p.data.dtype)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v,
                "hyper": {"beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                          "weight_decay": self.weight_decay}}

    def load_state_dict(self, state: dict) -> None:
        missing = set(self.params) - set(state["m"])
        if missing:
            raise ConfigError(f"optimizer state lacks {sorted(missing)[:5]}")
        self.t = int(state["t"])
        self.m = {k: np.array(state["m"][k], dtype=self.params[k].dtype) for k in self.params}
        self.v = {k: np.array(state["v"][k], dtype=self.params[k].dtype) for k in self.params}


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``; returns the raw norm."""
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * np.asarray(scale, dtype=grads[k].dtype)
    return norm


@dataclass
class Batch:
    retinas: np.ndarray    # (B, T, R)
    odometry: np.ndarray   # (B, T, 4)
    queries: np.ndarray    # (B, 2T, R)
    targets: np.ndarray    # (B, 2T, 5)
    episodes: np.ndarray   # (B,) dataset indices
    starts: np.ndarray     # (B,) slice offsets

    @property
    def length(self) -> int:
        return self.retinas.shape[1]


def draw_length(rng: np.random.Generator, config: TrainConfig) -> int:
    return int(rng.integers(config.t_min, config.t_max + 1))


def sample_batch(dataset: list[EpisodeRecord], config: TrainConfig, rng: np.random.Generator) -> Batch:
    """Draw T ~ U{t_min..t_max}, then batch_size random slices of length T with their 2T queries."""
    if not dataset:
        raise InputError("empty dataset")
    shortest = min(ep.length for ep in dataset)
    if shortest < config.t_max:
        raise InputError(f"dataset episodes have {shortest} steps, fewer than t_max={config.t_max}")
    t = draw_length(rng, config)
    idx = rng.integers(0, len(dataset), size=config.batch_size)
    starts = np.array([rng.integers(0, dataset[i].length - t + 1) for i in idx])
    slices = [dataset[i].slice(int(s), t) for i, s in zip(idx, starts)]
    queries = [make_training_queries(s, t) for s in slices]
    dtype = slices[0].retinas.dtype
    return Batch(
        retinas=np.stack([s.retinas for s in slices]),
        odometry=np.stack([s.odometry for s in slices]).astype(dtype),
        queries=np.stack([q for q, _ in queries]).astype(dtype),
        targets=np.stack([tg for _, tg in queries]).astype(dtype),
        episodes=idx, starts=starts,
    )


def batch_rng(config: TrainConfig, step: int) -> np.random.Generator:
    return rng_for(config.seed, "batch", step)


@dataclass
class StepResult:
    step: int
    lr: float
    loss_rpe: float
    loss_mim: float
    grad_norm: float


def _param_norms(model: MemRPEModel) -> str:
    norms = sorted(((float(np.linalg.norm(p.data)), n) for n, p in model.named_parameters()), reverse=True)
    return ", ".join(f"{n}={v:.3g}" for v, n in norms[:5])


def train_step(model: MemRPEModel, batch: Batch, optimizer: AdamW, lr: float, config: TrainConfig,
               step: int = 0) -> StepResult:
    model.zero_grad()
    state = model.rollout(batch.retinas, batch.odometry, bptt_window=config.bptt_window)
    y = model.read(state)
    l_rpe = loss_rpe(model.predict(y, batch.queries), batch.targets)
    total = l_rpe
    l_mim_value = 0.0
    if model.mim is not None and config.mim_weight > 0:
        chunks = model.query_encoder.chunks
        mask = sample_mim_mask(rng_for(config.seed, "mim", step), batch.queries.shape[:2], chunks,
                               config.mim_ratio)
        recon = model.reconstruct(y, batch.queries, mask)
        target = model.query_encoder.split(batch.queries)
        l_mim = loss_mim(recon, target, mask)
        l_mim_value = l_mim.item()
        total = total + l_mim * config.mim_weight
    if not math.isfinite(total.item()):
        raise NumericError(f"non-finite loss at step {step}; largest parameter norms: {_param_norms(model)}")
    total.backward()
    named = dict(model.named_parameters())
    grads = {n: p.grad for n, p in named.items() if p.grad is not None}
    norm = clip_by_global_norm(grads, config.grad_clip)
    if not math.isfinite(norm):
        raise NumericError(f"non-finite gradient at step {step}; largest parameter norms: {_param_norms(model)}")
    optimizer.step(grads, lr)
    return StepResult(step, lr, l_rpe.item(), l_mim_value, norm)


def make_optimizer(model: MemRPEModel, config: TrainConfig) -> AdamW:
    return AdamW(dict(model.named_parameters()), betas=(config.beta1, config.beta2), eps=config.adam_eps,
                 weight_decay=config.weight_decay)


def split_validation(dataset: list[EpisodeRecord], n_val: int) -> tuple[list[EpisodeRecord], list[EpisodeRecord]]:
    """Hold out whole scenes (taken from the end of the sorted scene list) until ``n_val`` episodes."""
    if n_val <= 0:
        return list(dataset), []
    scenes = sorted({ep.scene_id for ep in dataset})
    held: set[str] = set()
    count = 0
    for sid in reversed(scenes):
        if count >= n_val or len(held) == len(scenes) - 1:
            break
        held.add(sid)
        count += sum(ep.scene_id == sid for ep in dataset)
    train = [ep for ep in dataset if ep.scene_id not in held]
    val = [ep for ep in dataset if ep.scene_id in held][:n_val]
    return train, val


def _batches(dataset, config: TrainConfig, start: int) -> Iterator[Batch]:
    if not config.prefetch:
        for step in range(start, config.total_steps):
            yield sample_batch(dataset, config, batch_rng(config, step))
        return
    # batches depend only on the step counter, so a producer thread cannot change results
    q: queue.Queue = queue.Queue(maxsize=2)
    stop = threading.Event()

    def produce():
        try:
            for step in range(start, config.total_steps):
                item = sample_batch(dataset, config, batch_rng(config, step))
                while not stop.is_set():
                    try:
                        q.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
        except BaseException as exc:  # surfaced in the consumer
            q.put(exc)

    worker = threading.Thread(target=produce, daemon=True)
    worker.start()
    try:
        for _ in range(start, config.total_steps):
            item = q.get()
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        worker.join(timeout=5)


def _fmt(x: float) -> float:
    return float(f"{x:.6g}")


@dataclass
class TrainResult:
    model: MemRPEModel
    out_dir: Path
    best_score: float | None
    best_step: int | None
    history: list[dict]


def _read_log(path: Path, before_step: int) -> list[dict]:
    if not path.exists():
        return []
    records = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    return [r for r in records if r["step"] < before_step]


def train(spec: ModelSpec, dataset: list[EpisodeRecord], config: TrainConfig, out_dir,
          val_dataset: list[EpisodeRecord] | None = None, resume: bool = False,
          stop_after: int | None = None) -> TrainResult:
    """Run the training loop, writing ``train_log.jsonl`` and ``last/``, ``best/`` checkpoints.

    Without ``val_dataset``, whole scenes are held out of ``dataset`` for
    validation.  ``resume`` continues from ``out_dir/last``.  ``stop_after``
    ends the run after that many steps (the schedule still spans
    ``total_steps``), which is how interrupted runs are simulated.
    """
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if val_dataset is None:
        dataset, val_dataset = split_validation(dataset, config.val_episodes)
    else:
        val_dataset = val_dataset[:config.val_episodes]

    model = build_model(spec)
    optimizer = make_optimizer(model, config)
    start, best_score, best_step = 0, None, None
    if resume and (out / "last" / "checkpoint.json").exists():
        model, meta = load_checkpoint(out / "last", expect_spec=spec)
        optimizer = make_optimizer(model, config)
        optimizer.load_state_dict(meta["optimizer_state"])
        start = int(meta["step"])
        best_score = meta["extra"].get("best_score")
        best_step = meta["extra"].get("best_step")
    history = _read_log(out / LOG_NAME, start)
    log_path = out / LOG_NAME
    log_path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in history))

    end = config.total_steps if stop_after is None else min(config.total_steps, start + stop_after)
    with open(log_path, "a") as log:
        step = start
        for batch in _batches(dataset, config, start):
            if step >= end:
                break
            lr = learning_rate(step, config)
            res = train_step(model, batch, optimizer, lr, config, step)
            done = step + 1
            record = None
            if step % config.log_every == 0 or done == config.total_steps:
                record = {"step": step, "lr": _fmt(lr), "loss_rpe": _fmt(res.loss_rpe),
                          "loss_mim": _fmt(res.loss_mim), "grad_norm": _fmt(res.grad_norm), "length": batch.length}
            if val_dataset and (done % config.val_every == 0 or done == config.total_steps):
                report = eval_rpe(model, val_dataset, [config.t_max])
                score = report.accuracy[SELECTION_KEY]
                record = record or {"step": step, "lr": _fmt(lr), "loss_rpe": _fmt(res.loss_rpe),
                                    "loss_mim": _fmt(res.loss_mim), "grad_norm": _fmt(res.grad_norm),
                                    "length": batch.length}
                record["val"] = {k: round(v, 4) for k, v in report.accuracy.items()}
                if best_score is None or score > best_score:
                    best_score, best_step = score, done
                    save_checkpoint(out / "best", model, done, extra={"val": record["val"]})
            if record is not None:
                history.append(record)
                log.write(json.dumps(record, sort_keys=True) + "\n")
                log.flush()
            step = done
            if done % config.checkpoint_every == 0 or done == end:
                save_checkpoint(out / "last", model, done, optimizer.state_dict(),
                                extra={"best_score": best_score, "best_step": best_step,
                                       "train_config": config.to_dict()})
    return TrainResult(model, out, best_score, best_step, history)
