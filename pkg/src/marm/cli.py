"""Command-line interface.

Subcommands: gen-data, train, sweep, verify-oracle, bench-flops,
downsample, analyze-overlap, cache inspect, plot.  Every command exits 0 on
success; failures print a single ``error: <message>`` line to stderr and
exit nonzero.  Runs are single-threaded and deterministic for a given seed.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import plotting
from .cache import CacheStore
from .config import ConfigError, ModelConfig, load_config
from .engine import Engine
from .events import read_event_log, write_event_log
from .flops import MODE_CACHED, MODE_UNCACHED, count_flops
from .harness import (
    EvalSpec,
    bench_predict_scaling,
    read_sweep_csv,
    run_downsample,
    run_equivalence,
    run_overlap_analysis,
    run_sweep,
    run_training,
    write_overlap_csv,
)
from .metrics import window_mean, windowed_gauc
from .synth import SynthConfig, synth_stream


def _add_synth_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--events", type=int, default=50_000)
    p.add_argument("--users", type=int, default=200)
    p.add_argument("--clusters", type=int, default=6)
    p.add_argument("--items-per-cluster", type=int, default=400)
    p.add_argument("--persistence", type=float, default=0.9933)
    p.add_argument("--base-rate", type=float, default=0.10)
    p.add_argument("--match-gain", type=float, default=0.35)
    p.add_argument("--quality-gain", type=float, default=0.12)
    p.add_argument("--taste-gain", type=float, default=0.10)
    p.add_argument("--taste-alpha", type=float, default=1.0)
    p.add_argument("--p-state-item", type=float, default=0.45)
    p.add_argument("--p-taste-item", type=float, default=0.35)


def _synth_config(args) -> SynthConfig:
    return SynthConfig(
        users=args.users,
        n_clusters=args.clusters,
        items_per_cluster=args.items_per_cluster,
        events=args.events,
        persistence=args.persistence,
        label_base=args.base_rate,
        label_match_gain=args.match_gain,
        label_quality_gain=args.quality_gain,
        label_taste_gain=args.taste_gain,
        taste_alpha=args.taste_alpha,
        p_state_item=args.p_state_item,
        p_taste_item=args.p_taste_item,
    )


_MODEL_FLAGS = {
    "L": int, "n": int, "d": int, "F": int, "d_ff": int, "K": int,
    "learning_rate": float, "n_retain": int, "seed": int, "mode": str,
    "sequence_filter": str, "history_capacity": int, "gsu_candidates": int,
    "embedding_table_capacity": int,
}


def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat 'key: value' config file")
    for name, typ in _MODEL_FLAGS.items():
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ, default=None)


def _model_config(args) -> ModelConfig:
    values: dict = {}
    if args.config is not None:
        loaded = load_config(args.config)
        values = {f.name: getattr(loaded, f.name) for f in fields(loaded)}
    for name in _MODEL_FLAGS:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    return ModelConfig(**values)


def _events_iter(args, synth_cfg: SynthConfig | None = None):
    if getattr(args, "data", None) is not None:
        return read_event_log(args.data)
    cfg = synth_cfg or _synth_config(args)
    return synth_stream(cfg, args.stream_seed)


# -- subcommands ------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _synth_config(args)
    count = write_event_log(args.out, synth_stream(cfg, args.seed))
    print(f"wrote {count} events to {args.out}")
    return 0


def cmd_train(args) -> int:
    config = _model_config(args)
    cache = CacheStore.load(args.cache_in) if args.cache_in else None
    if args.checkpoint_in:
        engine = Engine.restore(args.checkpoint_in, cache=cache)
    else:
        engine = Engine(config, cache=cache)
    spec = EvalSpec(window=args.eval_window, segments=args.eval_segments)

    metrics_rows: list[tuple[int, float, float]] = []

    def on_step(step, buffer, losses):
        if args.report_every and step % args.report_every == 0:
            loss_w = window_mean(losses, min(spec.window, len(losses)))
            try:
                gauc_w = windowed_gauc(buffer, spec.window, 1)
            except ValueError:
                gauc_w = float("nan")
            metrics_rows.append((step, loss_w, gauc_w))

    result = run_training(engine, _events_iter(args), spec, on_step=on_step)
    if args.metrics_out:
        with open(args.metrics_out, "w") as fh:
            fh.write("step,window_loss,window_gauc\n")
            for step, loss_w, gauc_w in metrics_rows:
                fh.write(f"{step},{loss_w!r},{gauc_w!r}\n")
    if args.checkpoint_out:
        engine.checkpoint(args.checkpoint_out)
    if args.cache_out:
        engine.cache.persist(args.cache_out)
    counts = engine.param_counts()
    print(
        f"steps={result.steps} final_gauc={result.final_gauc!r} "
        f"final_loss={result.final_loss!r} cache_elements={engine.cache.element_count} "
        f"sparse_params={counts['sparse']} dense_params={counts['dense']}"
    )
    return 0


def _parse_int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip() != ""]


def cmd_sweep(args) -> int:
    synth_cfg = _synth_config(args)
    base = {"F": args.F, "learning_rate": args.learning_rate,
            "sequence_filter": args.sequence_filter}
    rows = run_sweep(
        grid_L=_parse_int_list(args.L),
        grid_n=_parse_int_list(args.n),
        grid_d=_parse_int_list(args.d),
        seeds=_parse_int_list(args.seeds),
        synth_config=synth_cfg,
        base_config=base,
        eval_spec=EvalSpec(window=args.eval_window, segments=args.eval_segments),
        out_csv=args.out,
        c_cap=args.c_cap,
        timing=not args.stable_output,
        progress=None if args.quiet else lambda msg: print(msg, flush=True),
    )
    print(f"sweep complete: {len(rows)} rows -> {args.out}")
    return 0


def cmd_verify_oracle(args) -> int:
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for i in range(args.configs):
        config = ModelConfig(
            L=int(rng.integers(0, args.max_L + 1)),
            n=int(rng.integers(1, args.max_n + 1)),
            d=int(rng.integers(1, args.max_d + 1)),
            F=int(rng.integers(1, args.max_F + 1)),
            learning_rate=0.0,
            seed=int(rng.integers(0, 2**31)),
        )
        steps = min(args.steps, config.n * 3)
        result = run_equivalence(config, steps)
        worst = max(worst, result.max_rel_error)
    print(f"configs={args.configs} max_rel_error={worst:.3e} tolerance={args.tolerance:g}")
    if worst > args.tolerance:
        raise RuntimeError(
            f"oracle equivalence violated: {worst:.3e} > {args.tolerance:g}"
        )
    return 0


def cmd_bench_flops(args) -> int:
    config = ModelConfig(L=args.L, n=args.flops_n, d=args.flops_d, F=args.flops_d)
    cached = count_flops(config, MODE_CACHED)
    uncached = count_flops(config, MODE_UNCACHED)
    ratio = uncached.total_flops / cached.total_flops
    print(
        f"analytic n={config.n} d={config.d} L={config.L}: "
        f"cached={cached.total_flops} uncached={uncached.total_flops} ratio={ratio:.1f}"
    )
    n_values = _parse_int_list(args.n_values)
    timings, exponent = bench_predict_scaling(
        n_values, d=args.d, L=args.L, candidates=args.candidates, repeats=args.repeats
    )
    for t in timings:
        print(f"predict n={t.n} seconds={t.seconds:.6f}")
    print(f"fit_exponent={exponent:.3f}")
    return 0


def cmd_downsample(args) -> int:
    synth_cfg = _synth_config(args)
    config = ModelConfig(
        L=args.L, n=args.n, d=args.d, F=args.F,
        learning_rate=args.learning_rate, seed=args.seed,
        sequence_filter=args.sequence_filter,
    )
    result = run_downsample(
        config, synth_cfg, args.keep, args.seed,
        warmup_fraction=args.warmup_fraction, eval_window=args.eval_window,
    )
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("position,full_gauc,thinned_gauc\n")
            for pos, g_full, g_thin in zip(
                result.positions, result.full_curve, result.thinned_curve
            ):
                fh.write(f"{pos},{g_full!r},{g_thin!r}\n")
    print(
        f"keep={args.keep} final_full={result.final_full!r} "
        f"final_thinned={result.final_thinned!r}"
    )
    return 0


def cmd_analyze_overlap(args) -> int:
    synth_cfg = _synth_config(args)
    config = ModelConfig(
        L=args.L, n=args.n, d=args.d, F=args.F, K=args.K,
        learning_rate=args.learning_rate, seed=args.seed,
        n_retain=args.n_retain if args.n_retain else 4 * args.n,
    )
    engine = Engine(config)
    for event in synth_stream(synth_cfg, args.seed):
        engine.train_step(event)
    users = sorted(engine.history.user_ids())[: args.analysis_users]
    analysis = run_overlap_analysis(
        engine, users, targets_per_user=args.targets_per_user, seed=args.seed
    )
    write_overlap_csv(args.out, analysis)
    print(f"wrote {len(analysis.rows)} overlap rows to {args.out}")
    mean = analysis.mean_matrix
    off_diag = mean[~np.eye(mean.shape[0], dtype=bool)]
    if off_diag.size:
        print(f"mean_offdiag_overlap={float(off_diag.mean()):.4f}")
    return 0


def cmd_cache_inspect(args) -> int:
    store = CacheStore.load(args.path)
    stats = store.stats()
    print(f"magic: MARM")
    print(f"version: 1")
    print(f"d: {store.d}")
    print(f"n_retain: {store.n_retain}")
    print(f"L: {store.depth_max}")
    print(f"entries: {stats.entries}")
    print(f"element_count: {stats.element_count}")
    print(f"hits: {stats.hits}")
    print(f"misses: {stats.misses}")
    print(f"evictions: {stats.evictions}")
    print(f"rejected: {stats.rejected}")
    return 0


def cmd_plot(args) -> int:
    rows = read_sweep_csv(args.sweep)
    plotting.write_gauc_plot(args.out, rows, title=args.title)
    print(f"wrote {args.out}")
    return 0


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="marm", description="cached multi-layer target-attention experiments"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic event log")
    _add_synth_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="stream-train one engine")
    _add_model_args(p)
    _add_synth_args(p)
    p.add_argument("--data", type=Path, help="event log; omit to use the synthetic stream")
    p.add_argument("--stream-seed", type=int, default=0)
    p.add_argument("--metrics-out", type=Path)
    p.add_argument("--checkpoint-in", type=Path)
    p.add_argument("--checkpoint-out", type=Path)
    p.add_argument("--cache-in", type=Path)
    p.add_argument("--cache-out", type=Path)
    p.add_argument("--report-every", type=int, default=5_000)
    p.add_argument("--eval-window", type=int, default=10_000)
    p.add_argument("--eval-segments", type=int, default=4)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="grid of training runs over (L, n, d, seed)")
    _add_synth_args(p)
    p.add_argument("--L", default="0,1,2")
    p.add_argument("--n", default="25,50,100")
    p.add_argument("--d", default="16")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--F", type=int, default=16)
    p.add_argument("--learning-rate", dest="learning_rate", type=float, default=0.05)
    p.add_argument("--sequence-filter", dest="sequence_filter", default="all")
    p.add_argument("--eval-window", type=int, default=40_000)
    p.add_argument("--eval-segments", type=int, default=4)
    p.add_argument("--c-cap", type=int, default=10_000_000)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--stable-output", action="store_true",
                   help="write wall_time as 0.0 so reruns are byte-identical")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify-oracle", help="frozen-parameter equivalence check")
    p.add_argument("--configs", type=int, default=100)
    p.add_argument("--steps", type=int, default=96)
    p.add_argument("--max-n", dest="max_n", type=int, default=64)
    p.add_argument("--max-L", dest="max_L", type=int, default=4)
    p.add_argument("--max-d", dest="max_d", type=int, default=16)
    p.add_argument("--max-F", dest="max_F", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.set_defaults(func=cmd_verify_oracle)

    p = sub.add_parser("bench-flops", help="analytic counts plus measured serving latency")
    p.add_argument("--flops-n", type=int, default=1000)
    p.add_argument("--flops-d", type=int, default=128)
    p.add_argument("--L", type=int, default=4)
    p.add_argument("--n-values", default="100,400,1600")
    p.add_argument("--d", type=int, default=16)
    p.add_argument("--candidates", type=int, default=256)
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(func=cmd_bench_flops)

    p = sub.add_parser("downsample", help="full vs thinned stream comparison")
    _add_synth_args(p)
    p.add_argument("--keep", type=float, required=True)
    p.add_argument("--L", type=int, default=1)
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--d", type=int, default=16)
    p.add_argument("--F", type=int, default=16)
    p.add_argument("--learning-rate", dest="learning_rate", type=float, default=0.05)
    p.add_argument("--sequence-filter", dest="sequence_filter", default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--warmup-fraction", type=float, default=0.25)
    p.add_argument("--eval-window", type=int, default=10_000)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_downsample)

    p = sub.add_parser("analyze-overlap", help="per-layer search overlap on a toy run")
    _add_synth_args(p)
    p.add_argument("--L", type=int, default=4)
    p.add_argument("--K", type=int, default=10)
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--d", type=int, default=16)
    p.add_argument("--F", type=int, default=16)
    p.add_argument("--n-retain", dest="n_retain", type=int, default=0)
    p.add_argument("--learning-rate", dest="learning_rate", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--analysis-users", type=int, default=8)
    p.add_argument("--targets-per-user", type=int, default=4)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_analyze_overlap)

    p = sub.add_parser("cache", help="cache file utilities")
    cache_sub = p.add_subparsers(dest="cache_command", required=True)
    pi = cache_sub.add_parser("inspect", help="print header and stats")
    pi.add_argument("path", type=Path)
    pi.set_defaults(func=cmd_cache_inspect)

    p = sub.add_parser("plot", help="SVG chart of GAUC vs cache size from a sweep CSV")
    p.add_argument("--sweep", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--title", default=None)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
