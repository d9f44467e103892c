"""
Ranking evaluation: P@1, NDCG and MRR with a single relevant candidate.
"""
import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from graphformers.errors import ContractError, GraphFormersError, RangeError
from graphformers.models.schemas import RankReport
from graphformers.nn.encoder import GraphInput
from graphformers.services.data import EvalInstance, truncate_neighbours

logger = logging.getLogger(__name__)

EncodeFn = Callable[[GraphInput], np.ndarray]
REPORT_COLUMNS = ["label", "p_at_1", "ndcg", "mrr", "num_instances"]


def positive_rank(scores: Sequence[float], positive_index: int) -> int:
    """1-based rank of the positive; ties with negatives count against it."""
    values = np.asarray(scores, dtype=np.float64)
    if values.ndim != 1 or values.size < 2:
        raise ContractError(f"need at least 2 candidate scores, got shape {values.shape}")
    if not 0 <= positive_index < values.size:
        raise RangeError(f"positive index {positive_index} outside [0, {values.size})")
    if not np.all(np.isfinite(values)):
        raise ContractError("scores must be finite")
    others = np.delete(values, positive_index)
    return 1 + int(np.count_nonzero(others >= values[positive_index]))


def rank_metrics(scores: Sequence[float], positive_index: int) -> Tuple[float, float, float]:
    """
    Returns:
        (p@1, ndcg, mrr) with p@1 = [r == 1], ndcg = 1/log2(r + 1), mrr = 1/r
    """
    r = positive_rank(scores, positive_index)
    return float(r == 1), 1.0 / math.log2(r + 1), 1.0 / r


def _encode_all(encode_fn: EncodeFn, instances: Sequence[EvalInstance], workers: int) -> Dict[GraphInput, np.ndarray]:
    distinct: Dict[GraphInput, int] = {}
    owner: Dict[GraphInput, int] = {}
    for index, inst in enumerate(instances):
        for inp in (inst.query, *inst.candidates):
            if inp not in distinct:
                distinct[inp] = len(distinct)
                owner[inp] = index

    def run(inp: GraphInput) -> np.ndarray:
        try:
            return np.asarray(encode_fn(inp), dtype=np.float64)
        except GraphFormersError as e:
            e.instance_index = owner[inp]
            logger.error(f"Encoding failed on instance {owner[inp]}: {e}")
            raise

    inputs = list(distinct)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            vectors = list(pool.map(run, inputs))
    else:
        vectors = [run(inp) for inp in inputs]
    return dict(zip(inputs, vectors))


def evaluate_model(
    encode_fn: EncodeFn,
    instances: Sequence[EvalInstance],
    dump_ranks: bool = False,
    label: Optional[str] = None,
    workers: int = 1,
) -> RankReport:
    """
    Encode each query and its candidates, score by inner product and average
    the ranking metrics. Each distinct GraphInput is encoded once.
    """
    embeddings = _encode_all(encode_fn, instances, workers)
    p1, ndcg, mrr, ranks = [], [], [], []
    for inst in instances:
        query = embeddings[inst.query]
        scores = [float(np.dot(query, embeddings[c])) for c in inst.candidates]
        r = positive_rank(scores, inst.positive_index)
        ranks.append(r)
        p1.append(float(r == 1))
        ndcg.append(1.0 / math.log2(r + 1))
        mrr.append(1.0 / r)
    count = len(instances)
    report = RankReport(
        p_at_1=float(np.mean(p1)) if count else 0.0,
        ndcg=float(np.mean(ndcg)) if count else 0.0,
        mrr=float(np.mean(mrr)) if count else 0.0,
        num_instances=count,
        ranks=ranks if dump_ranks else None,
        label=label,
    )
    logger.info(
        f"Evaluated {count} instances{f' ({label})' if label else ''}: "
        f"P@1={report.p_at_1:.4f} NDCG={report.ndcg:.4f} MRR={report.mrr:.4f}"
    )
    return report


def neighbour_sweep(
    encode_fn: EncodeFn,
    instances: Sequence[EvalInstance],
    caps: Sequence[int],
    label: Optional[str] = None,
) -> Dict[int, RankReport]:
    """Evaluate with every neighbour list truncated to each cap in ``caps``."""
    reports = {}
    for cap in caps:
        name = f"{label or 'model'}@{cap}"
        reports[cap] = evaluate_model(encode_fn, truncate_neighbours(instances, cap), label=name)
    return reports


def write_report(report: RankReport, path: Union[str, Path]) -> None:
    Path(path).write_text(report.model_dump_json(indent=2) + "\n")


def write_reports_csv(reports: Sequence[RankReport], path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(REPORT_COLUMNS)
        for report in reports:
            writer.writerow(
                [report.label or "", repr(report.p_at_1), repr(report.ndcg), repr(report.mrr), report.num_instances]
            )


def load_report(path: Union[str, Path]) -> RankReport:
    return RankReport.model_validate(json.loads(Path(path).read_text()))
