"""
Time and memory per training mini-batch as the neighbour count grows, for
the nested encoder and the cascaded PLM+Max baseline.
"""
import csv
import gc
import logging
import time
import tracemalloc
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import psutil

from graphformers.core.tensor import backward
from graphformers.models.schemas import (
    Aggregator,
    BenchOptions,
    BenchRow,
    BenchSummary,
    LinearFit,
    ModelConfig,
)
from graphformers.nn.encoder import CLS_ID, GraphBatch
from graphformers.nn.model import forward_batch
from graphformers.nn.params import ParamSet, init_params
from graphformers.services.tokenizer import FIRST_WORD_ID
from graphformers.services.training import inbatch_contrastive_loss

logger = logging.getLogger(__name__)

BENCH_COLUMNS = ["mode", "n_neighbours", "batch", "mean_ms", "std_ms", "peak_mib"]
MODES: Dict[str, Aggregator] = {"nested": Aggregator.NESTED, "cascaded": Aggregator.MAX}
_MIB = 1024.0 * 1024.0


def bench_config(cfg: ModelConfig, opts: BenchOptions, mode: str) -> ModelConfig:
    """``cfg`` with the benchmark's shape and the aggregator for ``mode``."""
    return cfg.model_copy(
        update={
            "max_tokens": opts.max_tokens,
            "hidden_size": opts.hidden_size,
            "num_layers": opts.num_layers,
            "num_heads": opts.num_heads,
            "max_neighbours": max(opts.neighbour_sizes),
            "aggregator": MODES[mode],
        }
    )


def random_batch(cfg: ModelConfig, batch_size: int, n_neighbours: int, rng: np.random.Generator) -> GraphBatch:
    """Full-length random sequences for ``batch_size`` instances of 1 + n nodes."""
    shape = (batch_size, 1 + n_neighbours, cfg.max_tokens)
    tokens = rng.integers(FIRST_WORD_ID, cfg.vocab_size, size=shape)
    tokens[..., 0] = CLS_ID
    return GraphBatch(
        tokens=tokens,
        token_mask=np.ones(shape, dtype=bool),
        node_mask=np.ones(shape[:2], dtype=bool),
    )


def _train_step(params: ParamSet, q_batch: GraphBatch, k_batch: GraphBatch) -> None:
    loss = inbatch_contrastive_loss(forward_batch(q_batch, params), forward_batch(k_batch, params))
    backward(loss, inputs=list(params))
    params.zero_grad()


def _timed(params: ParamSet, batches: Tuple[GraphBatch, GraphBatch], number: int) -> float:
    start = time.perf_counter()
    for _ in range(number):
        _train_step(params, *batches)
    return (time.perf_counter() - start) / number


def _peak_mib(params: ParamSet, batches: Tuple[GraphBatch, GraphBatch]) -> float:
    gc.collect()
    tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        baseline, _ = tracemalloc.get_traced_memory()
        _train_step(params, *batches)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return max(peak - baseline, 0) / _MIB


def measure_point(
    params: ParamSet,
    batches: Tuple[GraphBatch, GraphBatch],
    reps: int,
    warmup: int = 1,
    min_ticks: int = 100,
) -> Tuple[float, float, float, int]:
    """
    Returns:
        (mean_ms, std_ms, peak_mib, iterations per rep). Iterations per rep
        grow until one rep spans at least ``min_ticks`` clock ticks.
    """
    for _ in range(warmup):
        _train_step(params, *batches)
    resolution = time.get_clock_info("perf_counter").resolution
    number = 1
    while _timed(params, batches, number) * number < min_ticks * resolution:
        number *= 2
    if number > 1:
        logger.debug(f"Timer resolution {resolution:.1e}s: {number} iterations per rep")
    samples = np.array([_timed(params, batches, number) * 1000.0 for _ in range(reps)])
    std = float(samples.std(ddof=1)) if reps > 1 else 0.0
    return float(samples.mean()), std, _peak_mib(params, batches), number


def fit_linear(xs: Sequence[float], ys: Sequence[float]) -> LinearFit:
    """Least-squares y = alpha + beta * x with its R²."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    beta, alpha = np.polyfit(x, y, 1)
    residual = float(np.sum((y - (alpha + beta * x)) ** 2))
    total = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - residual / total if total > 0 else 1.0
    return LinearFit(alpha=float(alpha), beta=float(beta), r2=r2)


def summarise(rows: Sequence[BenchRow]) -> BenchSummary:
    """Linear fits per mode, nested/cascaded ratios and smallest-#N deductions."""
    summary = BenchSummary(rows=list(rows))
    by_mode: Dict[str, List[BenchRow]] = {}
    for row in rows:
        by_mode.setdefault(row.mode, []).append(row)
    for mode, mode_rows in by_mode.items():
        mode_rows = sorted(mode_rows, key=lambda r: r.n_neighbours)
        if len(mode_rows) >= 2:
            summary.fits[mode] = fit_linear([r.n_neighbours for r in mode_rows], [r.mean_ms for r in mode_rows])
        base = mode_rows[0]
        summary.marginal_ms[mode] = {r.n_neighbours: r.mean_ms - base.mean_ms for r in mode_rows}
        summary.marginal_mib[mode] = {r.n_neighbours: r.peak_mib - base.peak_mib for r in mode_rows}
    nested = {r.n_neighbours: r for r in by_mode.get("nested", [])}
    for row in by_mode.get("cascaded", []):
        if row.n_neighbours in nested and row.mean_ms > 0:
            summary.overhead_ratio[row.n_neighbours] = nested[row.n_neighbours].mean_ms / row.mean_ms
    return summary


def bench_scaling(
    cfg: ModelConfig,
    opts: BenchOptions,
    params: Optional[Dict[str, ParamSet]] = None,
    seed: int = 0,
    modes: Sequence[str] = ("nested", "cascaded"),
) -> BenchSummary:
    """
    Forward+backward time and peak memory per mini-batch for every #N in
    ``opts.neighbour_sizes`` and every mode. Inputs are built before timing.

    Args:
        cfg: base model config; shape fields are taken from ``opts``
        opts: benchmark options
        params: optional mode -> ParamSet; fresh parameters otherwise
        seed: seed for parameters and inputs
    """
    rows: List[BenchRow] = []
    process = psutil.Process()
    for mode in modes:
        mode_cfg = bench_config(cfg, opts, mode)
        mode_params = (params or {}).get(mode) or init_params(mode_cfg, seed=seed)
        for n in sorted(opts.neighbour_sizes):
            rng = np.random.default_rng(np.random.SeedSequence([seed, n]))
            batches = (
                random_batch(mode_cfg, opts.batch_size, n, rng),
                random_batch(mode_cfg, opts.batch_size, n, rng),
            )
            mean_ms, std_ms, peak, _ = measure_point(
                mode_params, batches, opts.reps, opts.warmup, opts.min_ticks
            )
            row = BenchRow(
                mode=mode,
                n_neighbours=n,
                batch=opts.batch_size,
                mean_ms=mean_ms,
                std_ms=std_ms,
                peak_mib=peak,
                rss_mib=process.memory_info().rss / _MIB,
                reps=opts.reps,
            )
            logger.info(f"bench {mode} #N={n}: {mean_ms:.2f} ± {std_ms:.2f} ms, peak {peak:.1f} MiB")
            rows.append(row)
    summary = summarise(rows)
    for mode, fit in summary.fits.items():
        logger.info(f"{mode}: time = {fit.alpha:.2f} + {fit.beta:.3f}·#N ms (R²={fit.r2:.4f})")
    return summary


def write_bench_csv(rows: Sequence[BenchRow], path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(BENCH_COLUMNS)
        for row in rows:
            writer.writerow(
                [row.mode, row.n_neighbours, row.batch, f"{row.mean_ms:.4f}", f"{row.std_ms:.4f}", f"{row.peak_mib:.4f}"]
            )
