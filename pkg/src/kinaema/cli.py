"""Command-line entry point: ``kinaema <subcommand> [flags] [section.key=value ...]``.

Exit codes: 0 success, 2 invalid configuration or usage, 3 I/O failure,
4 numeric failure.
"""
from __future__ import annotations

import os

# thread caps must be in place before numpy loads its BLAS
_THREADS = os.environ.get("KINAEMA_THREADS")
if _THREADS:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _THREADS)

import argparse  # noqa: E402
import csv  # noqa: E402
import hashlib  # noqa: E402
import json  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402
from dataclasses import replace  # noqa: E402
from pathlib import Path  # noqa: E402

from kinaema.errors import ConfigError, DomainError, InputError, LoadError, NumericError  # noqa: E402

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
FAMILY_ALIASES = {"trunc": "trunc_hist", "truncated": "trunc_hist"}


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("KINAEMA_THREADS", "") or os.cpu_count() or 1))
    except ValueError:
        raise ConfigError(f"KINAEMA_THREADS must be an integer, got {os.environ['KINAEMA_THREADS']!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _family(name: str) -> str:
    return FAMILY_ALIASES.get(name, name)


def _write_sidecar(out: Path, argv: list[str], started: float) -> None:
    """Wall-clock metadata goes next to ``out`` so ``out`` itself stays reproducible."""
    meta = {"argv": argv, "started_unix": round(started, 3), "finished_unix": round(time.time(), 3)}
    side = out.parent / (out.name + ".run.json")
    side.parent.mkdir(parents=True, exist_ok=True)
    side.write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def _emit(text: str, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)


def _load_episodes(path, limit: int | None = None):
    from kinaema.dataset import read_dataset
    records = read_dataset(path)
    return records if limit is None else records[:limit]


# -- subcommands -----------------------------------------------------------------

def cmd_gen_data(args, cfg) -> int:
    from kinaema.dataset import write_dataset
    from kinaema.world import generate_dataset
    scenes, records = generate_dataset(args.seed, args.episodes, args.length, args.profile, cfg.world,
                                       episodes_per_scene=args.episodes_per_scene)
    meta = {"seed": args.seed, "episodes": args.episodes, "length": args.length, "profile": args.profile,
            "episodes_per_scene": args.episodes_per_scene}
    write_dataset(records, args.out, cfg.world, scenes, meta=meta)
    digest = hashlib.sha256((Path(args.out) / "manifest.json").read_bytes()).hexdigest()
    print(f"wrote {len(records)} episodes ({len(scenes)} scenes) to {args.out}")
    print(f"manifest sha256 {digest}")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    from kinaema.training import train
    records = _load_episodes(args.data)
    val = _load_episodes(args.val_data) if args.val_data else None
    tcfg = cfg.train if worker_count() > 1 else replace(cfg.train, prefetch=False)
    res = train(cfg.model, records, tcfg, args.out, val_dataset=val, resume=args.resume,
                stop_after=args.stop_after)
    last = res.history[-1] if res.history else {}
    print(f"trained {cfg.model.family} to step {last.get('step', -1) + 1}; "
          f"best val acc(2m,90deg) {res.best_score} at step {res.best_step}")
    return EXIT_OK


def _load_model(path):
    from kinaema.model import load_checkpoint
    model, _ = load_checkpoint(path)
    return model


def cmd_eval(args, cfg) -> int:
    from kinaema.evaluation import eval_rpe
    model = _load_model(args.checkpoint)
    episodes = _load_episodes(args.dataset, cfg.eval.episodes)
    lengths = args.lengths or cfg.eval.lengths
    report = eval_rpe(model, episodes, lengths, cfg.eval.batch_size)
    _emit(report.to_json(), args.out)
    if report.below_chance:
        print("warning: below chance-equivalent at (2m, 90deg)", file=sys.stderr)
    return EXIT_OK


def cmd_sweep(args, cfg) -> int:
    from kinaema.evaluation import sweep_lengths
    models = {}
    for item in args.checkpoint:
        name, _, path = item.rpartition("=")
        models[name or Path(path).name] = _load_model(path)
    episodes = _load_episodes(args.dataset, cfg.eval.episodes)
    lengths = args.lengths or cfg.eval.lengths
    sweep_lengths(models, episodes, lengths, args.out, cfg.eval.batch_size)
    print(f"wrote {len(models) * len(lengths) * 3} rows to {args.out}")
    return EXIT_OK


def cmd_bench(args, cfg) -> int:
    from kinaema.bench import BENCH_COLUMNS, bench_step_cost
    specs = {}
    for name in (n.strip() for n in args.models.split(",") if n.strip()):
        specs[name] = replace(cfg.model, family=_family(name))
        specs[name].validate()
    report = bench_step_cost(specs, args.steps, repeats=args.repeats, warmup=args.warmup)
    if args.out is not None:
        report.write_csv(args.out)
        return EXIT_OK
    writer = csv.DictWriter(sys.stdout, fieldnames=list(BENCH_COLUMNS), lineterminator="\n")
    writer.writeheader()
    writer.writerows({k: (f"{v:.3f}" if isinstance(v, float) else v) for k, v in r.items()} for r in report.rows)
    return EXIT_OK


def cmd_dump_attn(args, cfg) -> int:
    from kinaema.evaluation import dump_attention
    model = _load_model(args.checkpoint)
    episodes = _load_episodes(args.dataset)
    if not 0 <= args.episode < len(episodes):
        raise InputError(f"episode {args.episode} out of range (dataset has {len(episodes)})")
    dump_attention(model, episodes[args.episode], args.out, args.length)
    print(f"wrote attention dump for episode {args.episode} to {args.out}")
    return EXIT_OK


def cmd_grad_check(args, cfg) -> int:
    from kinaema.verify import gradient_suite
    reports = gradient_suite(_family(args.model), seed=args.seed, max_entries=args.max_entries)
    worst = 0.0
    for block, rep in reports.items():
        name, err = rep.worst()
        worst = max(worst, err)
        print(f"{block:14s} max rel. error {err:.3e}  ({name})")
    print(f"max rel. error {worst:.3e} (tolerance {args.tol:g})")
    return EXIT_OK if worst < args.tol else EXIT_NUMERIC


def cmd_replicate(args, cfg) -> int:
    from kinaema.memory import ModelSpec
    from kinaema.replication import ReplicationPlan, run_replication
    defaults = ModelSpec().to_dict()
    overrides = {k: v for k, v in cfg.model.to_dict().items()
                 if k not in ("family", "seed") and v != defaults[k]}
    families = tuple(_family(f.strip()) for f in args.families.split(",") if f.strip())
    plan = ReplicationPlan(families=families, seeds=tuple(args.seeds), data_seed=args.data_seed,
                           episodes=args.episodes, test_episodes=args.test_episodes,
                           val_episodes=cfg.train.val_episodes, train=cfg.train, model_overrides=overrides)
    only = None
    if args.only:
        only = tuple((_family(f), int(s)) for f, s in (item.split(":") for item in args.only.split(",")))
    result = run_replication(plan, args.out, cfg.world, only)
    for r in result.runs:
        print(f"{r.family:10s} seed {r.seed}  val {r.val_score:.4f}  "
              + "  ".join(f"T={t} {acc['2m_90deg']:.4f} (floor {r.floor[t]['2m_90deg']:.4f})"
                          for t, acc in sorted(r.test.items())))
    for line in result.failures:
        print(f"FAIL {line}")
    if only is None:
        print("replication " + ("passed" if result.passed else "failed"))
    return EXIT_OK if result.passed else EXIT_NUMERIC


def cmd_inspect(args, cfg) -> int:
    path = Path(args.path)
    if (path / "manifest.json").exists():
        from kinaema.dataset import read_manifest
        m = read_manifest(path)
        lengths = sorted({e["length"] for e in m["episodes"]})
        info = {"kind": "dataset", "format_version": m["format_version"], "episodes": len(m["episodes"]),
                "scenes": len({e["scene_id"] for e in m["episodes"]}), "lengths": lengths,
                "retina_dim": m["retina_dim"], "meta": m.get("meta", {})}
    elif (path / "checkpoint.json").exists():
        from kinaema.model import load_checkpoint
        model, meta = load_checkpoint(path)
        info = {"kind": "checkpoint", "step": meta["step"], "model_spec": meta["model_spec"],
                "parameters": model.num_parameters(), "components": model.component_counts(),
                "has_optimizer": "optimizer" in meta}
    else:
        raise LoadError(f"{path} holds neither a dataset nor a checkpoint")
    print(json.dumps(info, indent=1, sort_keys=True))
    return EXIT_OK


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kinaema", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, func, help_text, out_required=False, out_help="output path"):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="TOML or JSON file with [world], [model], [train], [eval] sections")
        p.add_argument("--out", type=Path, required=out_required, help=out_help)
        p.add_argument("overrides", nargs="*", metavar="section.key=value",
                       help="config overrides, applied after the config file")
        p.set_defaults(func=func)
        return p

    p = add("gen-data", cmd_gen_data, "generate a dataset of episodes", True, "dataset directory to write")
    p.add_argument("--seed", type=int, default=0, help="dataset seed (default 0)")
    p.add_argument("--episodes", type=int, default=64, help="number of episodes (default 64)")
    p.add_argument("--length", type=int, default=100, help="observations per episode (default 100)")
    p.add_argument("--profile", choices=["train", "eval"], default="train",
                   help="action profile: train 10cm/5deg, eval 25cm/10deg")
    p.add_argument("--episodes-per-scene", type=int, default=8, help="episodes sharing a scene (default 8)")

    p = add("train", cmd_train, "train a model on a dataset", True, "run directory (log and checkpoints)")
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--val-data", help="validation dataset; default holds out scenes of --data")
    p.add_argument("--resume", action="store_true", help="continue from <out>/last")
    p.add_argument("--stop-after", type=int, help="stop after this many steps (schedule unchanged)")

    p = add("eval", cmd_eval, "threshold accuracies of a checkpoint", False,
            "JSON report path (default stdout)")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--dataset", required=True, help="evaluation dataset directory")
    p.add_argument("--lengths", type=_int_list, help="comma-separated sequence lengths (default eval.lengths)")

    p = add("sweep", cmd_sweep, "accuracy versus sequence length for several checkpoints", True, "CSV path")
    p.add_argument("--checkpoint", action="append", required=True,
                   help="name=checkpoint_dir; repeat for several models")
    p.add_argument("--dataset", required=True, help="evaluation dataset directory")
    p.add_argument("--lengths", type=_int_list, help="comma-separated sequence lengths (default eval.lengths)")

    p = add("bench", cmd_bench, "per-step update and decode cost", False, "CSV path (default stdout)")
    p.add_argument("--models", default="kinaema,gru,ema,trunc",
                   help="comma-separated families: kinaema, gru, ema, trunc")
    p.add_argument("--steps", type=_int_list, default=[10, 100, 1000], help="step indices (default 10,100,1000)")
    p.add_argument("--repeats", type=int, default=31, help="timed repetitions (default 31)")
    p.add_argument("--warmup", type=int, default=20, help="discarded warm-up calls (default 20)")

    p = add("dump-attn", cmd_dump_attn, "dump decoder cross-attention for one episode", True,
            "output directory")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--episode", type=int, default=0, help="episode index (default 0)")
    p.add_argument("--length", type=int, help="steps to roll in (default whole episode)")

    p = add("grad-check", cmd_grad_check, "finite-difference check of every block of a model family")
    p.add_argument("--model", default="kinaema", help="family: kinaema, gru, ema, trunc")
    p.add_argument("--tol", type=float, default=1e-4, help="max relative error (default 1e-4)")
    p.add_argument("--seed", type=int, default=0, help="seed for weights and inputs")
    p.add_argument("--max-entries", type=int, default=32, help="entries probed per tensor (default 32)")

    p = add("replicate", cmd_replicate, "train every family over several seeds and check their ordering",
            True, "shared working directory (data, runs, summary.json)")
    p.add_argument("--families", default="kinaema,gru,ema,trunc", help="families to train (default all four)")
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2], help="training seeds (default 0,1,2)")
    p.add_argument("--only", help="comma-separated family:seed pairs to run now, e.g. gru:1,ema:0")
    p.add_argument("--data-seed", type=int, default=0, help="dataset seed (default 0)")
    p.add_argument("--episodes", type=int, default=5000, help="training episodes (default 5000)")
    p.add_argument("--test-episodes", type=int, default=200, help="test episodes (default 200)")

    p = add("inspect", cmd_inspect, "summarize a dataset or checkpoint directory")
    p.add_argument("path", help="dataset or checkpoint directory")
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    started = time.time()
    try:
        from kinaema.config import load_config
        cfg = load_config(args.config, args.overrides)
        code = args.func(args, cfg)
    except (ConfigError, InputError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:  # includes LoadError and its subclasses
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    if args.out is not None and code == EXIT_OK:
        _write_sidecar(Path(args.out), argv, started)
    return code


if __name__ == "__main__":
    sys.exit(main())
