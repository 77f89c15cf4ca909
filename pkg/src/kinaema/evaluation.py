"""Mem-RPE accuracy reports, length sweeps, navigation metrics and attention dumps."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from kinaema.decoders import make_training_queries
from kinaema.engine.tensor import no_grad
from kinaema.errors import InputError
from kinaema.world import EpisodeRecord

THRESHOLDS: tuple[tuple[float, float], ...] = ((1.0, 10.0), (1.0, 90.0), (2.0, 90.0))
QUERY_TYPES = ("observed", "alternative")
SELECTION_KEY = "2m_90deg"


def threshold_name(meters: float, degrees: float) -> str:
    return f"{meters:g}m_{degrees:g}deg"


THRESHOLD_NAMES = tuple(threshold_name(*t) for t in THRESHOLDS)


def _unit(c: np.ndarray, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norm = np.hypot(c, s)
    safe = np.where(norm > 0, norm, 1.0)
    return np.where(norm > 0, c / safe, 1.0), np.where(norm > 0, s / safe, 0.0)


def pose_errors(preds, targets) -> tuple[np.ndarray, np.ndarray]:
    """Translation error (m) and rotation error (deg) per query.

    The goal position in the agent frame is rebuilt from distance and the
    normalized bearing, so bearing mistakes count as translation error.
    """
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape or p.shape[-1] != 5:
        raise InputError(f"predictions {p.shape} and targets {t.shape} must agree and end in 5")
    pc, ps = _unit(p[..., 1], p[..., 2])
    tc, ts = _unit(t[..., 1], t[..., 2])
    trans = np.hypot(p[..., 0] * pc - t[..., 0] * tc, p[..., 0] * ps - t[..., 0] * ts)
    rc, rs = _unit(p[..., 3], p[..., 4])
    qc, qs = _unit(t[..., 3], t[..., 4])
    # angle of R_pred * R_true^T
    rot = np.degrees(np.abs(np.arctan2(rs * qc - rc * qs, rc * qc + rs * qs)))
    return trans, rot


def threshold_hits(trans: np.ndarray, rot: np.ndarray) -> dict[str, np.ndarray]:
    return {threshold_name(m, d): (trans < m) & (rot < d) for m, d in THRESHOLDS}


def _accuracies(trans, rot) -> dict[str, float]:
    if len(trans) == 0:
        return {name: float("nan") for name in THRESHOLD_NAMES}
    return {name: float(hit.mean()) for name, hit in threshold_hits(trans, rot).items()}


@dataclass
class AccuracyReport:
    accuracy: dict[str, float]
    by_length: dict[int, dict[str, float]]
    by_type: dict[str, dict[str, float]]
    counts: dict[str, int]
    floor: dict[str, float]
    samples: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def below_chance(self) -> bool:
        return not self.accuracy[SELECTION_KEY] > self.floor[SELECTION_KEY]

    def nested(self) -> bool:
        """acc(1m,10deg) <= acc(1m,90deg) <= acc(2m,90deg) for every breakdown."""
        tables = [self.accuracy, self.floor, *self.by_length.values(), *self.by_type.values()]
        for tab in tables:
            vals = [tab[n] for n in THRESHOLD_NAMES]
            if any(np.isnan(vals)):
                continue
            if not (vals[0] <= vals[1] <= vals[2]):
                return False
        return True

    def to_dict(self) -> dict:
        r4 = lambda tab: {k: round(v, 4) for k, v in tab.items()}  # noqa: E731
        return {
            "accuracy": r4(self.accuracy),
            "by_length": {str(k): r4(v) for k, v in sorted(self.by_length.items())},
            "by_type": {k: r4(v) for k, v in self.by_type.items()},
            "counts": dict(self.counts),
            "constant_floor": r4(self.floor),
            "below_chance_equivalent": self.below_chance,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def split_by_step(self, length: int, boundary: int) -> tuple[dict[str, float], dict[str, float]]:
        """Accuracies for queries about steps before ``boundary`` and from it on, at one length."""
        s = self.samples
        sel = s["length"] == length
        old, recent = sel & (s["step"] < boundary), sel & (s["step"] >= boundary)
        return (_accuracies(s["trans"][old], s["rot"][old]),
                _accuracies(s["trans"][recent], s["rot"][recent]))


def constant_prediction(targets: np.ndarray) -> np.ndarray:
    """Dataset-mean relative pose, the chance-equivalent predictor."""
    return np.asarray(targets, dtype=np.float64).reshape(-1, 5).mean(axis=0)


def report_from_predictions(preds: np.ndarray, targets: np.ndarray, lengths: np.ndarray,
                            kinds: np.ndarray, steps: np.ndarray | None = None) -> AccuracyReport:
    """Assemble a report from flat per-query arrays (``kinds``: 0 observed, 1 alternative)."""
    preds = np.asarray(preds).reshape(-1, 5)
    targets = np.asarray(targets).reshape(-1, 5)
    lengths, kinds = np.asarray(lengths).reshape(-1), np.asarray(kinds).reshape(-1)
    steps = np.zeros(len(lengths), int) if steps is None else np.asarray(steps).reshape(-1)
    if len(preds) == 0:
        raise InputError("no queries to evaluate")
    trans, rot = pose_errors(preds, targets)
    const = np.broadcast_to(constant_prediction(targets), targets.shape)
    ftrans, frot = pose_errors(const, targets)
    by_length = {int(t): _accuracies(trans[lengths == t], rot[lengths == t]) for t in np.unique(lengths)}
    by_type = {name: _accuracies(trans[kinds == i], rot[kinds == i]) for i, name in enumerate(QUERY_TYPES)}
    counts = {"queries": int(len(trans)), **{name: int((kinds == i).sum()) for i, name in enumerate(QUERY_TYPES)}}
    counts.update({f"length_{int(t)}": int((lengths == t).sum()) for t in np.unique(lengths)})
    return AccuracyReport(_accuracies(trans, rot), by_length, by_type, counts, _accuracies(ftrans, frot),
                          samples={"trans": trans, "rot": rot, "length": lengths, "kind": kinds, "step": steps})


def predict_episodes(model, episodes: list[EpisodeRecord], length: int,
                     batch_size: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Roll memory over the first ``length`` steps and decode all 2T queries."""
    preds, targets = [], []
    with no_grad():
        for i in range(0, len(episodes), batch_size):
            group = [ep.slice(0, length) for ep in episodes[i:i + batch_size]]
            retinas = np.stack([g.retinas for g in group])
            odometry = np.stack([g.odometry for g in group])
            queries = [make_training_queries(g, length) for g in group]
            q = np.stack([r for r, _ in queries]).astype(retinas.dtype)
            state = model.rollout(retinas, odometry)
            preds.append(model.predict(model.read(state), q).data)
            targets.append(np.stack([t for _, t in queries]))
    return np.concatenate(preds), np.concatenate(targets)


def eval_rpe(model, episodes: list[EpisodeRecord], lengths, batch_size: int = 16) -> AccuracyReport:
    lengths = [int(t) for t in lengths]
    if not episodes:
        raise InputError("evaluation needs at least one episode")
    shortest = min(ep.length for ep in episodes)
    if max(lengths) > shortest:
        raise InputError(f"episodes of length {shortest} cannot be evaluated at length {max(lengths)}")
    all_p, all_t, all_len, all_kind, all_step = [], [], [], [], []
    for t in lengths:
        p, tg = predict_episodes(model, episodes, t, batch_size)
        n = p.shape[0]
        all_p.append(p.reshape(-1, 5))
        all_t.append(tg.reshape(-1, 5))
        all_len.append(np.full(n * 2 * t, t))
        all_kind.append(np.tile(np.repeat([0, 1], t), n))
        all_step.append(np.tile(np.concatenate([np.arange(t), np.arange(t)]), n))
    return report_from_predictions(np.concatenate(all_p), np.concatenate(all_t), np.concatenate(all_len),
                                   np.concatenate(all_kind), np.concatenate(all_step))


SWEEP_COLUMNS = ("model", "length", "threshold", "accuracy", "queries")


def sweep_lengths(models: dict, episodes: list[EpisodeRecord], lengths, path=None,
                  batch_size: int = 16) -> list[dict]:
    """One row per (model, length, threshold); written as CSV when ``path`` is given."""
    rows = []
    for name in models:
        report = eval_rpe(models[name], episodes, lengths, batch_size)
        for t in sorted(report.by_length):
            for thr in THRESHOLD_NAMES:
                rows.append({"model": name, "length": t, "threshold": thr,
                             "accuracy": round(report.by_length[t][thr], 4),
                             "queries": report.counts[f"length_{t}"]})
    if path is not None:
        write_csv(path, SWEEP_COLUMNS, rows)
    return rows


def write_csv(path, columns, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def read_sweep_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"model": r["model"], "length": int(r["length"]), "threshold": r["threshold"],
                 "accuracy": float(r["accuracy"]), "queries": int(r["queries"])}
                for r in csv.DictReader(fh)]


# -- navigation metrics ---------------------------------------------------------

def nav_metrics(episodes) -> tuple[float, float]:
    """Success rate and SPL for ``(success, path_len, shortest_len)`` tuples."""
    episodes = list(episodes)
    if not episodes:
        raise InputError("nav_metrics needs at least one episode")
    sr = spl = 0.0
    for success, path_len, shortest in episodes:
        if path_len <= 0 or shortest <= 0:
            raise InputError(f"path lengths must be positive, got {path_len} and {shortest}")
        s = 1.0 if success else 0.0
        sr += s
        spl += s * shortest / max(path_len, shortest)
    return sr / len(episodes), spl / len(episodes)


# -- attention dumps ------------------------------------------------------------

def dump_attention(model, episode: EpisodeRecord, path, length: int | None = None) -> dict:
    """Write cross-attention probabilities of the first CA layer for all 2T queries.

    ``path`` is a directory; it receives ``attention.json`` (per-query
    probabilities, Lq x N' per head), ``assignment.csv`` (argmax memory token
    per pseudo-patch, head-averaged) and ``head_mass.csv`` (per-head
    attention mass over memory tokens, scaled to sum to 100).
    """
    t = episode.length if length is None else length
    ep = episode.slice(0, t)
    retinas, targets = make_training_queries(ep, t)
    attn = model.rpe.cross_attention_modules()[0]
    attn.keep_probs = True
    try:
        with no_grad():
            state = model.rollout(ep.retinas[None], ep.odometry[None])
            model.predict(model.read(state), retinas[None].astype(ep.retinas.dtype))
        probs = np.asarray(attn.last_probs, dtype=np.float64)[0]  # (Q, heads, Lq, N')
    finally:
        attn.keep_probs, attn.last_probs = False, None
    assignment = probs.mean(axis=1).argmax(axis=-1)  # (Q, Lq)
    mass = probs.sum(axis=(0, 2))  # (heads, N')
    mass = 100.0 * mass / mass.sum(axis=-1, keepdims=True)
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "length": t,
        "heads": int(probs.shape[1]),
        "patches": int(probs.shape[2]),
        "memory_tokens": int(probs.shape[3]),
        "queries": [
            {"index": q, "type": QUERY_TYPES[q // t], "step": q % t,
             "target": [round(float(v), 6) for v in targets[q]],
             "probs": np.round(probs[q], 6).tolist()}
            for q in range(probs.shape[0])
        ],
    }
    (out / "attention.json").write_text(json.dumps(payload, sort_keys=True) + "\n")
    write_csv(out / "assignment.csv", ["query", "patch", "memory_token"],
              [{"query": q, "patch": p, "memory_token": int(assignment[q, p])}
               for q in range(assignment.shape[0]) for p in range(assignment.shape[1])])
    write_csv(out / "head_mass.csv", ["head", "memory_token", "score"],
              [{"head": h, "memory_token": n, "score": f"{mass[h, n]:.4f}"}
               for h in range(mass.shape[0]) for n in range(mass.shape[1])])
    return {"probs": probs, "assignment": assignment, "head_mass": mass}
