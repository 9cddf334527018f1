"""Command-line interface for dfmoe experiments."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import Callable

from dotenv import load_dotenv
from rich.console import Console
from rich.logging import RichHandler

from dfmoe.style import (
    DEFAULT_THEME,
    THEMES,
    DfmoeTheme,
    build_checks_table,
    build_distribution_table,
    build_metric_table,
    format_save_confirmation,
    format_summary_line,
    get_theme,
)

_initial_theme = THEMES[DEFAULT_THEME]
console = Console(theme=_initial_theme.to_rich_theme())

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_ERROR = 2


def main() -> None:
    """Entry point for the dfmoe CLI."""
    # Handle --version before any heavy imports or loading
    if len(sys.argv) > 1 and sys.argv[1] in ("--version", "-V"):
        from importlib.metadata import version
        print(f"dfmoe {version('dfmoe-cli')}")
        sys.exit(0)
    sys.exit(run(sys.argv[1:]))


def run(argv: list[str]) -> int:
    """Parse ``argv``, run one subcommand and return its exit code."""
    load_dotenv(Path.cwd() / ".env")
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)

    theme = get_theme(os.environ.get("DFMOE_THEME"))
    console.push_theme(theme.to_rich_theme())
    try:
        return _dispatch(args, theme)
    finally:
        console.pop_theme()


def _dispatch(args: argparse.Namespace, theme: DfmoeTheme) -> int:
    from dfmoe.errors import CheckFailed, DfmoeError

    handler: Callable[[argparse.Namespace, DfmoeTheme], int] = args.handler
    try:
        return handler(args, theme)
    except CheckFailed as e:
        console.print(f"[error]Check failed:[/error] {e}")
        return EXIT_CHECK_FAILED
    except (DfmoeError, OSError, ValueError) as e:
        console.print(f"[error]Error:[/error] {e}")
        return EXIT_ERROR


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dfmoe",
        description="Discrete flow matching and decentralized expert experiments.",
        epilog="dfmoe --version prints the installed version.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment config (.json, .yaml)")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--out", default=None, help="override the config output directory")
    common.add_argument("--format", choices=("json", "csv", "all"), default="all", help="report format")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    p = sub.add_parser("verify", parents=[common], help="run the equivalence suite")
    p.set_defaults(handler=_cmd_verify)

    p = sub.add_parser("experiment", parents=[common], help="dense vs routed experts on held-out data")
    p.set_defaults(handler=_cmd_experiment)

    p = sub.add_parser("ablate", parents=[common], help="expert count, algorithm and temperature sweeps")
    p.set_defaults(handler=_cmd_ablate)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic corpus and its features")
    p.add_argument("--binary", action="store_true", help="write features in the binary matrix format")
    p.set_defaults(handler=_cmd_synth)

    p = sub.add_parser("cluster", parents=[common], help="cluster a feature matrix into assignments")
    p.add_argument("--features", required=True, help="feature matrix (.txt or .bin)")
    p.add_argument("--ids", default=None, help="item ids, one per line (default: row-N)")
    p.set_defaults(handler=_cmd_cluster)

    p = sub.add_parser("train", parents=[common], help="train one expert per cluster plus the dense model")
    p.add_argument("--corpus", required=True, help="corpus JSON Lines file")
    p.add_argument("--assignments", required=True, help="item_id,cluster_id CSV")
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("infer", parents=[common], help="next-token distribution from stored experts")
    p.add_argument("--prefix", default="", help="comma-separated token ids")
    p.add_argument("--features", default=None, help="comma-separated feature vector (omit for text-only)")
    p.add_argument("--centroids", default=None, help="centroid matrix (default: <out>/centroids.txt)")
    p.add_argument("--exact", action="store_true", help="weight experts by context counts instead of routing")
    p.set_defaults(handler=_cmd_infer)

    p = sub.add_parser("report", help="re-render a saved report")
    p.add_argument("path", help="report.json or the directory holding it")
    p.add_argument("--out", default=None, help="also re-emit the report here")
    p.add_argument("--format", choices=("json", "csv", "all"), default="all")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(handler=_cmd_report)
    return parser


def _setup_logging(verbose: bool) -> None:
    level_name = "DEBUG" if verbose else os.environ.get("DFMOE_LOG_LEVEL", "WARNING").strip().upper()
    level = logging.getLevelName(level_name)
    if not isinstance(level, int):
        level = logging.WARNING
    package_logger = logging.getLogger("dfmoe")
    package_logger.handlers.clear()
    package_logger.addHandler(RichHandler(console=console, show_path=False, markup=False))
    package_logger.setLevel(level)
    package_logger.propagate = False


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _load(args: argparse.Namespace):
    from dfmoe.config import load_config

    config = load_config(args.config).with_overrides(seed=args.seed, output_dir=args.out)
    config.validate()
    return config


def _progress(theme: DfmoeTheme, status: str):
    """A live spinner on a terminal, nothing otherwise."""
    from dfmoe.progress import ProgressDisplay

    if not console.is_terminal:
        return nullcontext()
    return ProgressDisplay(console, initial_status=status, theme=theme)


def _render_report(report, theme: DfmoeTheme, verbose: bool) -> None:
    console.print()
    console.print(build_checks_table(report, theme))
    if verbose:
        for table in report.tables:
            console.print(build_metric_table(table, theme))
    console.print(format_summary_line(report, theme))


def _emit(report, out_dir: str, fmt: str, theme: DfmoeTheme, verbose: bool) -> int:
    from dfmoe.persist import emit_report

    paths = emit_report(report, out_dir, fmt)
    _render_report(report, theme, verbose)
    for path in paths:
        console.print(format_save_confirmation(str(path)))
    console.print()
    return report.exit_code


def _parse_ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _parse_floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _cmd_verify(args: argparse.Namespace, theme: DfmoeTheme) -> int:
    from dfmoe.harness import run_equivalence_suite

    config = _load(args)
    with _progress(theme, "Starting equivalence suite...") as progress:
        report = run_equivalence_suite(config, progress=progress)
    return _emit(report, config.output_dir, args.format, theme, args.verbose)


def _cmd_experiment(args: argparse.Namespace, theme: DfmoeTheme) -> int:
    from dfmoe.harness import run_experiment

    config = _load(args)
    with _progress(theme, "Starting experiment...") as progress:
        report = run_experiment(config, progress=progress)
    return _emit(report, config.output_dir, args.format, theme, True)


def _cmd_ablate(args: argparse.Namespace, theme: DfmoeTheme) -> int:
    from dfmoe.harness import run_ablation

    config = _load(args)
    with _progress(theme, "Starting ablation...") as progress:
        report = run_ablation(config, progress=progress)
    return _emit(report, config.output_dir, args.format, theme, True)


def _cmd_synth(args: argparse.Namespace, theme: DfmoeTheme) -> int:
    from dfmoe.data import write_corpus
    from dfmoe.persist import write_ids, write_matrix
    from dfmoe.synth import synth_corpus

    config = _load(args)
    out = Path(config.output_dir)
    corpus = synth_corpus(config).corpus
    items = corpus.items()
    ids = [i for i, f in items.items() if f is not None]
    suffix = ".bin" if args.binary else ".txt"
    written = [write_corpus(out / "corpus.jsonl", corpus)]
    if ids:
        written.append(write_matrix(out / f"features{suffix}", [items[i] for i in ids]))
        written.append(write_ids(out / "features.ids", ids))
    console.print(
        f"  [body]{len(corpus)} samples, {len(items)} items, "
        f"{len(items) - len(ids)} text-only[/body]"
    )
    for path in written:
        console.print(format_save_confirmation(str(path)))
    return EXIT_OK


def _cmd_cluster(args: argparse.Namespace, theme: DfmoeTheme) -> int:
    from dfmoe.clustering import normalize_features
    from dfmoe.errors import DimensionMismatch
    from dfmoe.harness import cluster_features
    from dfmoe.persist import read_ids, read_matrix, write_assignments, write_matrix
    from dfmoe.report import MetricTable

    config = _load(args)
    matrix = read_matrix(args.features)
    ids = read_ids(args.ids) if args.ids else [f"row-{i}" for i in range(len(matrix))]
    if len(ids) != len(matrix):
        raise DimensionMismatch(f"{len(ids)} ids for {len(matrix)} feature rows")
    model = cluster_features(config, normalize_features(matrix, ids), config.seed)

    out = Path(config.output_dir)
    written = [
        write_assignments(out / "assignments.csv", model.assignment),
        write_matrix(out / "centroids.txt", model.centroids),
    ]
    sizes = MetricTable("cluster sizes", ["cluster", "items"])
    for k, size in enumerate(model.sizes):
        sizes.add_row(k, int(size))
    console.print(build_metric_table(sizes, theme))
    console.print(f"  [dim]objective {model.objective:.6f} after {model.iterations} iterations[/dim]")
    for path in written:
        console.print(format_save_confirmation(str(path)))
    return EXIT_OK


def _cmd_train(args: argparse.Namespace, theme: DfmoeTheme) -> int:
    from dfmoe.clustering import cluster_balance_stats
    from dfmoe.config import component_rng
    from dfmoe.data import read_corpus
    from dfmoe.errors import DimensionMismatch
    from dfmoe.experts import train_dense, train_experts
    from dfmoe.harness import spread_unassigned
    from dfmoe.persist import read_assignments
    from dfmoe.report import MetricTable
    from dfmoe.store import DENSE_NAME, ModelStore, expert_name

    config = _load(args)
    K = config.num_experts
    corpus = read_corpus(args.corpus, config.vocab)
    corpus.validate()
    corpus.require_nonempty()
    assignment = read_assignments(args.assignments)
    bad = sorted({k for k in assignment.values() if not 0 <= k < K})
    if bad:
        raise DimensionMismatch(f"cluster ids {bad} outside [0, {K})")
    spread_unassigned(assignment, list(corpus.items()), K, component_rng(config.seed, "text_only"))

    order, alpha = config.experts.order, config.experts.alpha_eval
    experts = train_experts(corpus.shards(assignment, K), order, alpha, workers=config.experts.workers)
    store = ModelStore(config.output_dir)
    written = [store.put(expert_name(k), model) for k, model in enumerate(experts)]
    written.append(store.put(DENSE_NAME, train_dense(corpus, order, alpha)))

    stats = MetricTable("cluster balance", ["cluster", "items", "pairs", "tokens"])
    for s in cluster_balance_stats(assignment, corpus, K):
        stats.add_row(s.cluster, s.items, s.pairs, s.tokens)
    console.print(build_metric_table(stats, theme))
    for path in written:
        console.print(format_save_confirmation(str(path)))
    return EXIT_OK


def _cmd_infer(args: argparse.Namespace, theme: DfmoeTheme) -> int:
    import numpy as np

    from dfmoe.clustering import normalize_features
    from dfmoe.config import component_rng
    from dfmoe.decentral import ensemble_next_token
    from dfmoe.errors import ModelFormatError
    from dfmoe.experts import context_shares
    from dfmoe.persist import atomic_write_text, read_matrix
    from dfmoe.router import RouteDecision, RouteMode, RouterConfig, route_sample
    from dfmoe.store import ModelStore

    config = _load(args)
    out = Path(config.output_dir)
    experts = ModelStore(out).experts()
    if not experts:
        raise ModelFormatError(f"no experts stored under {out / 'models'}")
    prefix = _parse_ints(args.prefix)

    if args.exact:
        decision = RouteDecision(context_shares(experts, prefix), RouteMode.EXACT, "context-count shares")
    else:
        centroids = read_matrix(args.centroids or out / "centroids.txt")
        router = RouterConfig(config.router.temperature, min(config.router.top_k, len(experts)), centroids)
        features = None
        if args.features:
            features = normalize_features(np.array([_parse_floats(args.features)])).vectors[0]
        decision = route_sample(features, router, component_rng(config.seed, "router"))
    probs = ensemble_next_token(experts, decision.weights, prefix)

    record = {
        "prefix": prefix,
        "mode": decision.mode.value,
        "reason": decision.reason,
        "weights": list(decision.weights),
        "distribution": [float(p) for p in probs],
    }
    path = atomic_write_text(out / "infer.json", json.dumps(record, indent=2, sort_keys=True) + "\n")
    console.print(f"  [dim]route:[/dim] [accent]{decision.reason}[/accent]  "
                  f"[dim]weights {', '.join(f'{w:.4f}' for w in decision.weights)}[/dim]")
    console.print(build_distribution_table(probs, theme, mask_id=config.vocab.mask_id))
    console.print(format_save_confirmation(str(path)))
    return EXIT_OK


def _cmd_report(args: argparse.Namespace, theme: DfmoeTheme) -> int:
    from dfmoe.persist import load_report

    report = load_report(args.path)
    if args.out:
        return _emit(report, args.out, args.format, theme, True)
    _render_report(report, theme, True)
    return report.exit_code
