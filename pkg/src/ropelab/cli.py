"""Command-line front end.

Five subcommands: ``train`` one run from a config file, ``sweep`` a grid
of runs, ``plan`` one cache-memory query, ``plan-curve`` a CSV of queries,
and ``eval`` a checkpoint against a corpus.  Config and grid files may be
TOML or JSON (chosen by extension); see ``run_from_dict`` for the schema.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from . import data as data_mod
from .evaluation import evaluate
from .exceptions import ParameterError
from .model import BlockTopology, ModelConfig, load_checkpoint
from .attention import AttentionConfig
from .planner import (PRECISION_BYTES, PlanQuery, cache_bytes, emit_curve,
                      format_bytes, write_curve_csv)
from .rope import RopeConfig, build_cache
from .train import Schedule, TrainRun, run_name, train, run_sweep


def load_config_file(path) -> dict:
    """Parse a TOML or JSON config file by extension."""
    path = Path(path)
    if path.suffix == ".toml":
        with open(path, "rb") as f:
            return tomllib.load(f)
    if path.suffix == ".json":
        with open(path) as f:
            return json.load(f)
    raise ParameterError(f"config must be .toml or .json, got {path.name}")


def model_config_from_dict(m: dict) -> ModelConfig:
    """Build a ModelConfig from the flat ``model`` config section."""
    m = dict(m)
    model_dim = m["model_dim"]
    n_heads = m["n_heads"]
    if model_dim % n_heads != 0:
        raise ParameterError(f"model_dim {model_dim} not divisible by n_heads {n_heads}")
    rope = RopeConfig(
        head_dim=model_dim // n_heads,
        rotary_fraction=m.get("rotary_fraction", 1.0),
        max_positions=m.get("max_positions", 256),
        base=m.get("rotary_base", 10000.0),
    )
    attention = AttentionConfig(
        model_dim=model_dim,
        n_heads=n_heads,
        n_kv_heads=m.get("n_kv_heads", n_heads),
        rope=rope,
        qk_norm=m.get("qk_norm", False),
    )
    default_topo = BlockTopology.sequential() if m.get("topology", "sequential") \
        == "sequential" else BlockTopology.parallel()
    topology = BlockTopology(
        kind=m.get("topology", "sequential"),
        norm_kind=m.get("norm_kind", default_topo.norm_kind),
        mlp_kind=m.get("mlp_kind", default_topo.mlp_kind),
    )
    return ModelConfig(
        vocab_size=m["vocab_size"],
        n_layers=m["n_layers"],
        model_dim=model_dim,
        attention=attention,
        topology=topology,
        mlp_hidden=m.get("mlp_hidden", 2 * model_dim),
        tie_embeddings=m.get("tie_embeddings", True),
        norm_eps=m.get("norm_eps", 1e-5),
    )


def run_from_dict(d: dict) -> TrainRun:
    """Assemble a TrainRun from a parsed config dict.

    Top level: seed, steps, batch_size, seq_len, corpus_id, and optional
    clip_norm / weight_decay / betas / adam_eps / split_frac / log_every.
    ``schedule`` holds total_steps (defaults to steps), peak_lr,
    warmup_frac, final_lr_frac.  ``model`` holds vocab_size, n_layers,
    model_dim, n_heads, plus optional n_kv_heads, rotary_fraction,
    rotary_base, max_positions, qk_norm, topology, norm_kind, mlp_kind,
    mlp_hidden, tie_embeddings, norm_eps.
    """
    sched_d = dict(d.get("schedule", {}))
    sched_d.setdefault("total_steps", d["steps"])
    schedule = Schedule(**sched_d)
    clip = d.get("clip_norm", 1.0)
    return TrainRun(
        seed=d.get("seed", 0),
        model_cfg=model_config_from_dict(d["model"]),
        schedule=schedule,
        batch_size=d["batch_size"],
        steps=d["steps"],
        corpus_id=d["corpus_id"],
        seq_len=d["seq_len"],
        clip_norm=None if clip in (None, 0, 0.0) else float(clip),
        weight_decay=d.get("weight_decay", 0.1),
        betas=tuple(d.get("betas", (0.9, 0.95))),
        adam_eps=d.get("adam_eps", 1e-8),
        split_frac=d.get("split_frac", 0.1),
        log_every=d.get("log_every", 1),
    )


def _set_dotted(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    here = d
    for key in keys[:-1]:
        here = here.setdefault(key, {})
    here[keys[-1]] = value


def grid_to_runs(grid: dict) -> list:
    """Expand ``{"base": {...}, "vary": {dotted.path: [values]}}`` to runs.

    The cross product of all vary lists is taken in sorted-key order, each
    combination overlaying the base config.
    """
    base = grid.get("base")
    if base is None:
        raise ParameterError("grid file needs a 'base' section")
    vary = grid.get("vary", {})
    combos = [{}]
    for key in sorted(vary):
        values = vary[key]
        if not isinstance(values, list) or not values:
            raise ParameterError(f"vary entry {key!r} must be a nonempty list")
        combos = [dict(c, **{key: v}) for c in combos for v in values]
    runs = []
    for combo in combos:
        d = json.loads(json.dumps(base))  # deep copy via round trip
        for key, value in combo.items():
            _set_dotted(d, key, value)
        runs.append(run_from_dict(d))
    return runs


def _cmd_train(args) -> int:
    run = run_from_dict(load_config_file(args.config))
    trace, _ = train(run, out_dir=args.out)
    final = trace.loss[-1] if trace.loss else float("nan")
    print(f"{run_name(run)}: {run.steps} steps, final loss {final:.4f}, "
          f"{len(trace.spikes)} spike(s), artifacts in {args.out}")
    return 0


def _cmd_sweep(args) -> int:
    runs = grid_to_runs(load_config_file(args.grid))
    traces = run_sweep(runs, out_dir=args.out)
    for run, trace in zip(runs, traces):
        final = trace.loss[-1] if trace.loss else float("nan")
        print(f"{run_name(run)}: final loss {final:.4f}, {len(trace.spikes)} spike(s)")
    print(f"{len(runs)} run(s) complete, artifacts in {args.out}")
    return 0


def _query_from_args(args, max_positions: int, fraction: float) -> PlanQuery:
    return PlanQuery(
        max_positions=max_positions,
        head_dim=args.head_dim,
        rotary_fraction=fraction,
        precision_bytes=PRECISION_BYTES[args.precision],
        devices=args.devices,
        placement=args.placement,
        sincos_factor=args.sincos_factor,
    )


def _cmd_plan(args) -> int:
    result = cache_bytes(_query_from_args(args, args.seq_len, args.fraction))
    print(f"rotary_dims      : {result.rotary_dims} of {args.head_dim}")
    print(f"bytes_per_device : {result.bytes_per_device} ({format_bytes(result.bytes_per_device)})")
    print(f"bytes_total      : {result.bytes_total} ({format_bytes(result.bytes_total)})")
    return 0


def _cmd_plan_curve(args) -> int:
    template = _query_from_args(args, max_positions=1, fraction=0.0)
    rows = emit_curve(template, args.seq_lens, args.fractions)
    write_curve_csv(rows, args.out)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    params, config = load_checkpoint(args.checkpoint)
    cache = build_cache(config.attention.rope)
    seq_len = args.seq_len or config.attention.rope.max_positions
    corpus = args.corpus
    if corpus.startswith("synthetic:"):
        kind = corpus.split(":", 1)[1]
        batches = data_mod.synthetic_eval_batches(
            kind, seq_len, config.vocab_size, args.seed, args.batch_size,
            args.max_batches)
    else:
        ids = np.frombuffer(Path(corpus).read_bytes(), dtype=np.uint8).astype(np.int64)
        if ids.size == 0:
            raise OSError(f"corpus is empty: {corpus}")
        batches = data_mod.held_out_batches(ids, seq_len, args.batch_size,
                                            limit=args.max_batches)
    report = evaluate(params, config, cache, batches, corpus_id=corpus,
                      with_accuracy=args.accuracy)
    payload = dataclasses.asdict(report)
    Path(args.out).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    print(f"mean_nll {report.mean_nll:.4f} nats, perplexity {report.perplexity:.2f}"
          + (f", accuracy {report.task_accuracy:.3f}" if report.task_accuracy is not None
             else ""))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ropelab",
        description="Desk-scale lab for partial rotary position embeddings.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train one run from a config file")
    p_train.add_argument("--config", required=True, help="TOML or JSON run config")
    p_train.add_argument("--out", required=True, help="output directory for artifacts")
    p_train.set_defaults(func=_cmd_train)

    p_sweep = sub.add_parser("sweep", help="train a grid of runs")
    p_sweep.add_argument("--grid", required=True, help="TOML or JSON grid file")
    p_sweep.add_argument("--out", required=True, help="output directory for artifacts")
    p_sweep.set_defaults(func=_cmd_sweep)

    def add_plan_args(p):
        p.add_argument("--head-dim", type=int, default=256)
        p.add_argument("--precision", choices=sorted(PRECISION_BYTES), default="fp32")
        p.add_argument("--devices", type=int, default=1)
        p.add_argument("--placement", choices=("replicate", "shard"), default="replicate")
        p.add_argument("--sincos-factor", type=int, choices=(1, 2), default=1,
                       help="1 counts sin and cos jointly inside rotary_dims; "
                            "2 accounts a full-width copy of each table")

    p_plan = sub.add_parser("plan", help="cache footprint for one configuration")
    p_plan.add_argument("--seq-len", type=int, required=True)
    p_plan.add_argument("--fraction", type=float, required=True)
    add_plan_args(p_plan)
    p_plan.set_defaults(func=_cmd_plan)

    p_curve = sub.add_parser("plan-curve", help="cache footprint CSV over a grid")
    p_curve.add_argument("--out", required=True, help="destination CSV path")
    p_curve.add_argument("--seq-lens", type=int, nargs="+",
                         default=[1024, 4096, 16384, 65536, 262144, 1048576])
    p_curve.add_argument("--fractions", type=float, nargs="+",
                         default=[0.0, 0.25, 0.5, 1.0])
    add_plan_args(p_curve)
    p_curve.set_defaults(func=_cmd_plan_curve)

    p_eval = sub.add_parser("eval", help="score a checkpoint on a corpus")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--corpus", required=True,
                        help="a byte corpus file, or synthetic:copy / synthetic:reverse")
    p_eval.add_argument("--out", required=True, help="destination JSON path")
    p_eval.add_argument("--seq-len", type=int, default=None)
    p_eval.add_argument("--batch-size", type=int, default=16)
    p_eval.add_argument("--max-batches", type=int, default=16)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--accuracy", action="store_true")
    p_eval.set_defaults(func=_cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
