"""
Command-line entry point: gen-data | train | eval | bench | inspect.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from graphformers.config.settings import RunConfig, load_config, reload_settings, write_resolved_config
from graphformers.errors import ConfigError, GraphFormersError
from graphformers.models.schemas import Aggregator, EncoderMode, StageMode
from graphformers.nn.model import make_encoder
from graphformers.nn.params import init_params, load_checkpoint, load_manifest
from graphformers.observability.tracing import configure_logging, start_trace
from graphformers.services.benchmark import bench_scaling, write_bench_csv
from graphformers.services.data import (
    corpus_graph,
    generate_synthetic_graph,
    graph_summary,
    load_dataset,
    load_vocab,
    make_eval_instances,
    save_dataset,
)
from graphformers.services.evaluation import evaluate_model, neighbour_sweep, write_report, write_reports_csv
from graphformers.services.neighbor_cache import NeighborCache
from graphformers.services.training import train_two_stage

logger = logging.getLogger(__name__)

COMMANDS = ("gen-data", "train", "eval", "bench", "inspect")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting with status 2."""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: error: {message}")


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected 'on' or 'off', got '{value}'")
    return value == "on"


def _int_list(value: str) -> List[int]:
    try:
        return [int(part) for part in value.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{value}'")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--outdir", dest="output_dir", help="run directory")
    common.add_argument("--data", dest="data_dir", help="dataset directory (default: <outdir>/data)")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--log-level", dest="log_level", help="DEBUG, INFO, WARNING, ERROR or CRITICAL")
    common.add_argument("--log-format", dest="log_format", choices=["json", "text"])

    model = _Parser(add_help=False)
    model.add_argument("--mode", choices=[m.value for m in EncoderMode], help="nested aggregation direction")
    model.add_argument("--aggregator", choices=[a.value for a in Aggregator], help="nested or a cascaded baseline")
    model.add_argument("--share-gnn", dest="share_gnn", type=_on_off, metavar="{on,off}")
    model.add_argument("--relation-bias", dest="relation_bias", type=_on_off, metavar="{on,off}")

    parser = _Parser(prog="graphformers", description="GNN-nested transformers for textual graphs")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")
    sub.required = True

    gen = sub.add_parser("gen-data", parents=[common], help="generate or tokenize a textual graph and split its edges")
    gen.add_argument("--corpus", help="text corpus file to tokenize instead of generating")

    train = sub.add_parser("train", parents=[common, model], help="two-stage link-prediction training")
    train.add_argument("--stages", choices=[s.value for s in StageMode], help="two = progressive, one = clean only")
    train.add_argument("--lr", dest="learning_rate", type=float, help="learning rate")
    train.add_argument("--batch-size", dest="batch_size", type=int)
    train.add_argument("--max-steps", dest="max_steps", type=int, help="step cap for both stages")

    evaluate = sub.add_parser("eval", parents=[common], help="ranking evaluation of a checkpoint")
    evaluate.add_argument("--checkpoint", help="checkpoint directory (default: <outdir>/checkpoints/final)")
    evaluate.add_argument("--split", choices=["valid", "test"])
    evaluate.add_argument("--n-neg", dest="n_neg", type=int, help="negatives per query")
    evaluate.add_argument("--instances", dest="num_instances", type=int, help="max evaluation instances")
    evaluate.add_argument("--neighbour-sweep", dest="neighbour_sweep", type=_int_list, help="e.g. 1,2,3,4,5")
    evaluate.add_argument("--workers", dest="num_workers", type=int, help="encoding threads")
    evaluate.add_argument("--dump-ranks", dest="dump_ranks", action="store_const", const=True)

    bench = sub.add_parser("bench", parents=[common, model], help="time and memory per mini-batch vs #N")
    bench.add_argument("--neighbour-sizes", dest="neighbour_sizes", type=_int_list, help="e.g. 3,5,10,20,50")
    bench.add_argument("--reps", type=int)
    bench.add_argument("--batch-size", dest="batch_size", type=int)

    inspect = sub.add_parser("inspect", parents=[common], help="summarise a checkpoint or a dataset")
    inspect.add_argument("--checkpoint", help="checkpoint directory")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Map parsed flags onto dotted config keys."""
    get = lambda name: getattr(args, name, None)  # noqa: E731
    overrides = {
        "seed": get("seed"),
        "output_dir": get("output_dir"),
        "data_dir": get("data_dir"),
        "log_level": get("log_level"),
        "log_format": get("log_format"),
        "num_workers": get("num_workers"),
        "data.corpus": get("corpus"),
        "model.mode": get("mode"),
        "model.aggregator": get("aggregator"),
        "model.share_gnn": get("share_gnn"),
        "model.relation_bias": get("relation_bias"),
        "train.stages": get("stages"),
        "train.learning_rate": get("learning_rate"),
        "eval.split": get("split"),
        "eval.n_neg": get("n_neg"),
        "eval.num_instances": get("num_instances"),
        "eval.neighbour_sweep": get("neighbour_sweep"),
        "eval.dump_ranks": get("dump_ranks"),
        "bench.neighbour_sizes": get("neighbour_sizes"),
        "bench.reps": get("reps"),
    }
    if args.command == "train":
        overrides["train.batch_size"] = get("batch_size")
        if get("max_steps") is not None:
            overrides["train.stage1.max_steps"] = args.max_steps
            overrides["train.stage2.max_steps"] = args.max_steps
    elif args.command == "bench":
        overrides["bench.batch_size"] = get("batch_size")
    return {key: value for key, value in overrides.items() if value is not None}


def _print_json(data: Any) -> None:
    print(json.dumps(data, indent=2, default=str))


# --- commands ----------------------------------------------------------------
def cmd_gen_data(config: RunConfig, args: argparse.Namespace) -> None:
    vocab = None
    if config.data.corpus:
        graph, splits, vocab = corpus_graph(
            config.data.corpus, config.data, config.model.max_tokens, config.model.vocab_size, seed=config.seed
        )
    else:
        graph, splits = generate_synthetic_graph(config.data, seed=config.seed)
    directory = save_dataset(config.dataset_dir, graph, splits, vocab)
    summary = graph_summary(graph)
    if vocab is not None:
        summary["vocab"] = len(vocab)
    summary.update({name: len(splits.get(name)) for name in ("train", "valid", "test")})
    logger.info(f"Wrote dataset to {directory}")
    _print_json(summary)


def cmd_train(config: RunConfig, args: argparse.Namespace) -> None:
    graph, splits = load_dataset(config.dataset_dir)
    vocab = load_vocab(config.dataset_dir)
    if vocab is not None and len(vocab) > config.model.vocab_size:
        raise ConfigError(f"dataset vocabulary has {len(vocab)} ids, model.vocab_size is {config.model.vocab_size}")
    params = init_params(config.model, seed=config.seed)
    logger.info(f"Initialised {params.parameter_count()} parameters ({config.model.aggregator.value}, {config.model.mode.value})")
    result = train_two_stage(
        params, graph, splits, config.train, seed=config.train_seed, output_dir=config.output_dir, vocab=vocab
    )
    _print_json(
        {
            "parameters": params.parameter_count(),
            "versions": result.stage_versions,
            "final_train_loss": (result.log.losses("train") or [None])[-1],
            "pollution": result.pollution.model_dump(),
            "checkpoint": str(Path(config.output_dir) / "checkpoints" / "final"),
        }
    )


def cmd_eval(config: RunConfig, args: argparse.Namespace) -> None:
    checkpoint = Path(args.checkpoint) if args.checkpoint else Path(config.output_dir) / "checkpoints" / "final"
    params = load_checkpoint(checkpoint)
    cfg = params.config
    graph, splits = load_dataset(config.dataset_dir)
    opts = config.eval
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xE7A1]))
    instances = make_eval_instances(
        graph,
        splits.get(opts.split),
        opts.n_neg,
        min(opts.neighbours, cfg.max_neighbours),
        rng,
        context=graph.without_edges(splits.held_out()),
        exclude_adjacent=opts.exclude_adjacent,
        max_instances=opts.num_instances,
        max_tokens=cfg.max_tokens,
    )
    cache = None
    if cfg.is_nested and cfg.mode == EncoderMode.UNIDIRECTIONAL:
        cache = NeighborCache.for_config(cfg, bound_version=params.version)
    label = f"{cfg.aggregator.value}-{cfg.mode.value}"
    encode = make_encoder(params, cache=cache)
    report = evaluate_model(encode, instances, dump_ranks=opts.dump_ranks, label=label, workers=config.num_workers)
    outdir = Path(config.output_dir)
    write_report(report, outdir / "report.json")
    reports = [report]
    if opts.neighbour_sweep:
        sweep = neighbour_sweep(encode, instances, opts.neighbour_sweep, label=label)
        reports.extend(sweep[cap] for cap in opts.neighbour_sweep)
    write_reports_csv(reports, outdir / "reports.csv")
    if cache is not None:
        logger.info(f"Neighbour cache: {cache.stats().model_dump()}")
    _print_json([r.model_dump(exclude={"ranks"}) for r in reports])


def cmd_bench(config: RunConfig, args: argparse.Namespace) -> None:
    summary = bench_scaling(config.model, config.bench, seed=config.seed)
    outdir = Path(config.output_dir)
    write_bench_csv(summary.rows, outdir / "bench.csv")
    (outdir / "bench_summary.json").write_text(summary.model_dump_json(indent=2) + "\n")
    _print_json(summary.model_dump(include={"fits", "overhead_ratio"}))


def cmd_inspect(config: RunConfig, args: argparse.Namespace) -> None:
    if args.checkpoint:
        manifest = load_manifest(args.checkpoint)
        params = load_checkpoint(args.checkpoint)
        _print_json(
            {
                "config": manifest.config.model_dump(mode="json"),
                "step": manifest.step,
                "stage": manifest.stage,
                "version": manifest.version,
                "parameters": params.parameter_count(),
                "shapes": params.shapes(),
            }
        )
        return
    graph, splits = load_dataset(config.dataset_dir)
    summary = graph_summary(graph)
    summary.update({name: len(splits.get(name)) for name in ("train", "valid", "test")})
    _print_json(summary)


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "inspect": cmd_inspect,
}


def run_command(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse ``argv``, resolve the config and run one subcommand.

    Returns:
        0 on success, 1 on a usage error, 2 on a runtime error
    """
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:
        return int(e.code or 0)

    try:
        config = load_config(args.config, _overrides(args))
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except GraphFormersError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1

    configure_logging(config.log_level, config.log_format)
    reload_settings(config)
    outdir = Path(config.output_dir)
    trace = start_trace(args.command, {"seed": config.seed, "output_dir": str(outdir)})
    try:
        write_resolved_config(config, outdir)
        with trace.trace_span(args.command, "command"):
            HANDLERS[args.command](config, args)
    except (GraphFormersError, OSError) as e:
        where = f" ({e.filename})" if isinstance(e, OSError) and e.filename else ""
        logger.error(f"{args.command} failed: {e}{where}")
        print(f"error: {e}{where}", file=sys.stderr)
        return 2
    finally:
        trace.finalize(outdir)
    return 0


def main() -> None:
    sys.exit(run_command())
