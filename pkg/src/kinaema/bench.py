"""Per-step cost of memory updates and decoding as the sequence grows."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from kinaema.engine.tensor import Tensor, no_grad
from kinaema.evaluation import write_csv
from kinaema.memory import ModelSpec
from kinaema.model import build_model

BENCH_COLUMNS = ("model", "step", "update_median_us", "update_p95_us", "decode_median_us", "decode_p95_us",
                 "state_bytes", "context_tokens")
DEFAULT_STEPS = (10, 100, 1000)


# CPU time of this process: unaffected by other processes competing for the core
clock = time.process_time


def _calibrate(fn, min_sample: float) -> int:
    inner = 1
    while True:
        t0 = clock()
        for _ in range(inner):
            fn()
        if clock() - t0 >= min_sample:
            return inner
        inner *= 2


def time_calls(fns, repeats: int = 31, warmup: int = 20, min_sample: float = 1e-3) -> list[np.ndarray]:
    """CPU seconds per call for each of ``fns``, one entry per repetition.

    The first ``warmup`` calls of each function are discarded.  Each sample
    runs the function in an inner loop lasting at least ``min_sample``
    seconds.  Repetitions are interleaved across functions so that slow drift
    in machine speed affects all of them alike.
    """
    for fn in fns:
        for _ in range(warmup):
            fn()
    inners = [_calibrate(fn, min_sample) for fn in fns]
    samples = np.empty((len(fns), repeats))
    for i in range(repeats):
        for j, (fn, inner) in enumerate(zip(fns, inners)):
            t0 = clock()
            for _ in range(inner):
                fn()
            samples[j, i] = (clock() - t0) / inner
    return list(samples)


def time_call(fn, repeats: int = 31, warmup: int = 20, min_sample: float = 1e-3) -> np.ndarray:
    return time_calls([fn], repeats, warmup, min_sample)[0]


@dataclass
class BenchReport:
    rows: list[dict] = field(default_factory=list)

    def median(self, model: str, step: int, what: str = "update") -> float:
        for r in self.rows:
            if r["model"] == model and r["step"] == step:
                return r[f"{what}_median_us"]
        raise KeyError((model, step))

    def write_csv(self, path) -> None:
        write_csv(path, BENCH_COLUMNS, [{k: (f"{v:.3f}" if isinstance(v, float) else v) for k, v in r.items()}
                                        for r in self.rows])


def bench_step_cost(specs: dict[str, ModelSpec], steps=DEFAULT_STEPS, repeats: int = 31, warmup: int = 20,
                    seed: int = 0) -> BenchReport:
    """Time one memory update and one single-query decode at each step index.

    The memory is advanced with fixed inputs to each step index; the timed
    update is applied to that state without advancing it further.
    """
    report = BenchReport()
    steps = sorted(int(s) for s in steps)
    for name, spec in specs.items():
        model = build_model(spec)
        rng = np.random.default_rng(seed)
        retina = rng.normal(size=(1, spec.retina_dim)).astype(np.float32)
        odometry = np.array([[0.1, 0.0, 1.0, 0.0]], dtype=np.float32)
        query = rng.normal(size=(1, 1, spec.retina_dim)).astype(np.float32)
        with no_grad():
            x = model.encoder.encode_obs(Tensor(retina))
            u = model.encoder.encode_odo(Tensor(odometry))
            state, states = model.init_state(1), []
            for target in steps:
                while state.step_count < target:
                    state = model.memory.update(state, x, u)
                states.append(state)
            upd = time_calls([lambda st=st: model.memory.update(st, x, u) for st in states], repeats, warmup)
            dec = time_calls([lambda st=st: model.predict(model.read(st), query) for st in states],
                             repeats, warmup)
            for target, st, tu, td in zip(steps, states, upd, dec):
                report.rows.append({
                    "model": name, "step": target,
                    "update_median_us": float(np.median(tu) * 1e6),
                    "update_p95_us": float(np.percentile(tu, 95) * 1e6),
                    "decode_median_us": float(np.median(td) * 1e6),
                    "decode_p95_us": float(np.percentile(td, 95) * 1e6),
                    "state_bytes": st.nbytes,
                    "context_tokens": int(model.read(st).shape[1]),
                })
    return report
