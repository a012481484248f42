"""Experiment orchestration: training runs, the cache-size scaling sweep,
the frozen-parameter oracle equivalence check, the downsampling comparison,
and search-overlap analysis.  Owns the results CSV format.

Every run is a pure function of (config, seed): fresh engine, fresh cache,
synthetic stream regenerated from the seed.  The sweep CSV is written
incrementally so an interrupted grid resumes by skipping finished rows,
and rewritten in canonical grid order on completion.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .attention import oracle_stack
from .cache import CacheStore
from .config import ConfigError, ModelConfig
from .engine import Engine
from .events import EventRecord
from .gsu import overlap_matrix
from .metrics import EvalBuffer, window_mean, windowed_gauc
from .synth import SynthConfig, synth_stream


@dataclass
class EvalSpec:
    """Last-window evaluation: GAUC over the final ``window`` events,
    averaged across ``segments`` disjoint sub-windows."""

    window: int = 40_000
    segments: int = 4


@dataclass
class TrainRunResult:
    steps: int
    final_gauc: float
    final_loss: float
    total_flops: int
    engine: Engine
    buffer: EvalBuffer
    losses: list[float]


def run_training(
    engine: Engine,
    events: Iterable[EventRecord],
    eval_spec: EvalSpec = EvalSpec(),
    on_step: Callable[[int, EvalBuffer, list[float]], None] | None = None,
) -> TrainRunResult:
    buffer = EvalBuffer()
    losses: list[float] = []
    steps = 0
    total_flops = 0
    for event in events:
        report = engine.train_step(event)
        buffer.add(event.user_id, report.prediction, event.label)
        losses.append(report.loss)
        steps += 1
        total_flops += report.flops
        if on_step is not None:
            on_step(steps, buffer, losses)
    final_gauc = windowed_gauc(buffer, eval_spec.window, eval_spec.segments)
    final_loss = window_mean(losses, min(eval_spec.window, len(losses)))
    return TrainRunResult(
        steps=steps,
        final_gauc=final_gauc,
        final_loss=final_loss,
        total_flops=total_flops,
        engine=engine,
        buffer=buffer,
        losses=losses,
    )


# -- scaling sweep --------------------------------------------------------

@dataclass
class SweepResult:
    L: int
    n: int
    d: int
    C: int
    seed: int
    final_gauc: float
    final_loss: float
    total_flops: int
    cache_element_count: int
    wall_time: float


SWEEP_COLUMNS = [f.name for f in fields(SweepResult)]

DEFAULT_C_CAP = 10_000_000


def write_sweep_csv(path: str | Path, rows: list[SweepResult]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_COLUMNS)
        for row in rows:
            writer.writerow([getattr(row, c) for c in SWEEP_COLUMNS])


def read_sweep_csv(path: str | Path) -> list[SweepResult]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != SWEEP_COLUMNS:
            raise ValueError(f"unexpected sweep CSV header {reader.fieldnames}")
        for rec in reader:
            rows.append(
                SweepResult(
                    L=int(rec["L"]),
                    n=int(rec["n"]),
                    d=int(rec["d"]),
                    C=int(rec["C"]),
                    seed=int(rec["seed"]),
                    final_gauc=float(rec["final_gauc"]),
                    final_loss=float(rec["final_loss"]),
                    total_flops=int(rec["total_flops"]),
                    cache_element_count=int(rec["cache_element_count"]),
                    wall_time=float(rec["wall_time"]),
                )
            )
    return rows


def run_sweep(
    grid_L: list[int],
    grid_n: list[int],
    grid_d: list[int],
    seeds: list[int],
    synth_config: SynthConfig,
    base_config: dict | None = None,
    eval_spec: EvalSpec = EvalSpec(),
    out_csv: str | Path | None = None,
    c_cap: int = DEFAULT_C_CAP,
    timing: bool = True,
    progress: Callable[[str], None] | None = None,
) -> list[SweepResult]:
    """One training run per (L, n, d, seed), deterministic per point.

    ``base_config`` carries ModelConfig overrides shared by all points
    (learning rate, F, filter, ...).  Derived fields (d_ff, n_retain,
    history_capacity) are re-derived per point unless overridden.
    """
    if not grid_L or not grid_n or not grid_d or not seeds:
        raise ConfigError("sweep grid and seed list must be nonempty")
    base_config = dict(base_config or {})
    for L in grid_L:
        for n in grid_n:
            for d in grid_d:
                c = L * n * d
                if c > c_cap:
                    raise ConfigError(
                        f"grid point L={L} n={n} d={d} has C={c} > cap {c_cap}"
                    )
    done: dict[tuple[int, int, int, int], SweepResult] = {}
    out_path = Path(out_csv) if out_csv is not None else None
    if out_path is not None and out_path.exists():
        for row in read_sweep_csv(out_path):
            done[(row.L, row.n, row.d, row.seed)] = row

    append_fh = None
    if out_path is not None:
        fresh = not out_path.exists()
        append_fh = open(out_path, "a", newline="")
        if fresh:
            csv.writer(append_fh).writerow(SWEEP_COLUMNS)
            append_fh.flush()

    rows: list[SweepResult] = []
    try:
        for L in grid_L:
            for n in grid_n:
                for d in grid_d:
                    for seed in seeds:
                        key = (L, n, d, seed)
                        if key in done:
                            rows.append(done[key])
                            continue
                        row = _run_sweep_point(
                            L, n, d, seed, synth_config, base_config, eval_spec, timing
                        )
                        rows.append(row)
                        done[key] = row
                        if append_fh is not None:
                            csv.writer(append_fh).writerow(
                                [getattr(row, c) for c in SWEEP_COLUMNS]
                            )
                            append_fh.flush()
                        if progress is not None:
                            progress(
                                f"L={L} n={n} d={d} seed={seed} "
                                f"gauc={row.final_gauc:.4f} loss={row.final_loss:.4f}"
                            )
    finally:
        if append_fh is not None:
            append_fh.close()
    if out_path is not None:
        write_sweep_csv(out_path, rows)
    return rows


def _run_sweep_point(
    L: int,
    n: int,
    d: int,
    seed: int,
    synth_config: SynthConfig,
    base_config: dict,
    eval_spec: EvalSpec,
    timing: bool,
) -> SweepResult:
    kwargs = dict(base_config)
    kwargs.update(L=L, n=n, d=d, seed=seed)
    config = ModelConfig(**kwargs)
    engine = Engine(config)
    start = time.perf_counter()
    result = run_training(engine, synth_stream(synth_config, seed), eval_spec)
    elapsed = time.perf_counter() - start if timing else 0.0
    return SweepResult(
        L=L,
        n=n,
        d=d,
        C=config.cache_size,
        seed=seed,
        final_gauc=result.final_gauc,
        final_loss=result.final_loss,
        total_flops=result.total_flops,
        cache_element_count=engine.cache.element_count,
        wall_time=elapsed,
    )


def mean_gauc_by_point(rows: list[SweepResult]) -> dict[tuple[int, int, int], float]:
    by_point: dict[tuple[int, int, int], list[float]] = {}
    for row in rows:
        by_point.setdefault((row.L, row.n, row.d), []).append(row.final_gauc)
    return {k: float(np.mean(v)) for k, v in by_point.items()}


# -- frozen-parameter oracle equivalence ----------------------------------

@dataclass
class EquivalenceResult:
    max_rel_error: float
    steps: int


def equivalence_stream(config: ModelConfig, steps: int, seed: int) -> list[EventRecord]:
    """Round-robin users, fresh unique items, at most n events per user so
    the engine's window never truncates relative to the full-prefix oracle."""
    users = max(1, math.ceil(steps / config.n))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0E0E]))
    events = []
    per_user = [0] * users
    for t in range(steps):
        uid = t % users
        item = (uid + 1) * 1_000_000 + per_user[uid]
        per_user[uid] += 1
        events.append(
            EventRecord(
                user_id=uid,
                item_id=item,
                label=int(rng.random() < 0.5),
                timestamp=t + 1,
            )
        )
    return events


def run_equivalence(config: ModelConfig, steps: int) -> EquivalenceResult:
    """Stream events through the cached engine and through the one-shot
    strictly-causal reference; report the worst per-step relative error of
    the predictions.  Defined only for frozen parameters."""
    if config.learning_rate != 0.0:
        raise ConfigError("equivalence is only defined with learning_rate = 0")
    if config.K != 0:
        raise ConfigError("equivalence requires K = 0 (search off)")
    config = config.with_overrides(sequence_filter="all", n_retain=config.n)
    engine = Engine(config)
    # a zero head would make every prediction 0.5 and the check vacuous
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x4EAD]))
    engine.head_w = rng.uniform(-1.0, 1.0, config.d).astype(np.float32)
    engine.head_b = float(rng.uniform(-0.5, 0.5))

    events = equivalence_stream(config, steps, config.seed)
    engine_preds: dict[int, list[float]] = {}
    user_items: dict[int, list[int]] = {}
    for event in events:
        report = engine.train_step(event)
        engine_preds.setdefault(event.user_id, []).append(report.prediction)
        user_items.setdefault(event.user_id, []).append(event.item_id)

    max_rel = 0.0
    for uid, items in user_items.items():
        E = engine.item_table.vectors(items, insert=False)
        stack = oracle_stack(E, engine.layers)
        logits = stack[-1] @ engine.head_w + engine.head_b
        oracle_preds = 1.0 / (1.0 + np.exp(-logits))
        for p_engine, p_oracle in zip(engine_preds[uid], oracle_preds):
            denom = max(abs(p_oracle), abs(p_engine), 1e-12)
            max_rel = max(max_rel, abs(p_engine - float(p_oracle)) / denom)
    return EquivalenceResult(max_rel_error=max_rel, steps=len(events))


# -- downsampling comparison ----------------------------------------------

@dataclass
class DownsampleResult:
    positions: list[int]  # original-stream positions where the curves sample
    full_curve: list[float]
    thinned_curve: list[float]
    final_full: float
    final_thinned: float


def run_downsample(
    config: ModelConfig,
    synth_config: SynthConfig,
    keep_fraction: float,
    seed: int,
    warmup_fraction: float = 0.25,
    curve_points: int = 8,
    eval_window: int = 20_000,
) -> DownsampleResult:
    """Warm-start two engines from one checkpointed prefix, then continue
    one on the full remainder and one on an i.i.d.-thinned remainder.
    Curves are trailing-window GAUC sampled at shared stream positions."""
    if not 0.0 < keep_fraction <= 1.0:
        raise ConfigError("keep_fraction must lie in (0, 1]")
    events = list(synth_stream(synth_config, seed))
    warmup = int(len(events) * warmup_fraction)
    base = Engine(config)
    for event in events[:warmup]:
        base.train_step(event)
    ckpt = base.checkpoint_bytes()
    cache_bytes = base.cache.to_bytes()

    def fork() -> Engine:
        import tempfile

        # restore from in-memory copies; the cache is duplicated so the
        # branches cannot share state
        with tempfile.TemporaryDirectory() as tmp:
            ck = Path(tmp) / "model.ckpt"
            ck.write_bytes(ckpt)
            cache = CacheStore.from_bytes(cache_bytes)
            return Engine.restore(ck, cache=cache)

    remainder = events[warmup:]
    stride = max(1, len(remainder) // curve_points)
    sample_positions = [
        warmup + i for i in range(stride, len(remainder) + 1, stride)
    ]

    def run_branch(keep: float, branch_salt: int):
        engine = fork()
        rng = np.random.default_rng(np.random.SeedSequence([seed, branch_salt]))
        buffer = EvalBuffer()
        curve = []
        sample_iter = iter(sample_positions)
        next_sample = next(sample_iter, None)
        for offset, event in enumerate(remainder):
            if keep >= 1.0 or rng.random() < keep:
                report = engine.train_step(event)
                buffer.add(event.user_id, report.prediction, event.label)
            position = warmup + offset + 1
            while next_sample is not None and position >= next_sample:
                curve.append(_safe_gauc(buffer, eval_window))
                next_sample = next(sample_iter, None)
        final = _safe_gauc(buffer, eval_window)
        return curve, final

    full_curve, final_full = run_branch(1.0, 0xF011)
    thinned_curve, final_thinned = run_branch(keep_fraction, 0xF011)
    return DownsampleResult(
        positions=sample_positions,
        full_curve=full_curve,
        thinned_curve=thinned_curve,
        final_full=final_full,
        final_thinned=final_thinned,
    )


def _safe_gauc(buffer: EvalBuffer, window: int) -> float:
    try:
        return windowed_gauc(buffer, window, 1)
    except ValueError:
        return float("nan")


# -- flops / latency benchmark --------------------------------------------

@dataclass
class PredictTiming:
    n: int
    seconds: float


def bench_predict_scaling(
    n_values: list[int],
    d: int = 16,
    L: int = 2,
    F: int = 16,
    candidates: int = 256,
    repeats: int = 5,
    seed: int = 0,
) -> tuple[list[PredictTiming], float]:
    """Measure predict_batch wall time as history length grows and fit the
    log-log exponent.  Linear-cost serving lands well under 2."""
    timings = []
    for n in n_values:
        config = ModelConfig(
            L=L, n=n, d=d, F=F, seed=seed, learning_rate=0.0,
            history_capacity=max(4 * n, 512),
        )
        engine = Engine(config)
        uid = 7
        for t in range(n):
            engine.train_step(
                EventRecord(user_id=uid, item_id=1_000 + t, label=t % 2, timestamp=t + 1)
            )
        cand = [5_000_000 + i for i in range(candidates)]
        engine.predict_batch(uid, cand)  # warm up allocations
        best = math.inf
        for _ in range(repeats):
            start = time.perf_counter()
            engine.predict_batch(uid, cand)
            best = min(best, time.perf_counter() - start)
        timings.append(PredictTiming(n=n, seconds=best))
    xs = np.log([t.n for t in timings])
    ys = np.log([t.seconds for t in timings])
    exponent = float(np.polyfit(xs, ys, 1)[0])
    return timings, exponent


# -- search overlap analysis ----------------------------------------------

@dataclass
class OverlapAnalysis:
    rows: list[tuple[int, int, int, float]]  # (target_id, layer_i, layer_j, overlap)
    mean_matrix: np.ndarray
    layers: int


def run_overlap_analysis(
    engine: Engine,
    users: list[int],
    targets_per_user: int = 4,
    seed: int = 0,
) -> OverlapAnalysis:
    """Per-layer top-K searches for sampled (user, target) pairs, reported
    as pairwise overlap rates.  Means are taken per target pair."""
    if engine.config.K <= 0:
        raise ConfigError("overlap analysis needs GSU enabled (K > 0)")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x07E7]))
    known_items = list(engine.item_table._index.keys())
    if not known_items:
        raise ConfigError("engine has no trained items")
    rows = []
    matrices = []
    depth = engine.config.L + 1
    for uid in users:
        picks = rng.choice(len(known_items), size=targets_per_user, replace=False)
        for pick in picks:
            target = known_items[int(pick)]
            results = engine.gsu_layer_results(uid, target)
            matrix = overlap_matrix(results)
            matrices.append(matrix)
            for i in range(depth):
                for j in range(depth):
                    rows.append((target, i, j, float(matrix[i, j])))
    mean_matrix = np.mean(matrices, axis=0) if matrices else np.zeros((depth, depth))
    return OverlapAnalysis(rows=rows, mean_matrix=mean_matrix, layers=depth)


def write_overlap_csv(path: str | Path, analysis: OverlapAnalysis) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["target_id", "layer_i", "layer_j", "overlap"])
        for target, i, j, value in analysis.rows:
            writer.writerow([target, i, j, value])
        for i in range(analysis.layers):
            for j in range(analysis.layers):
                writer.writerow(["mean", i, j, float(analysis.mean_matrix[i, j])])
