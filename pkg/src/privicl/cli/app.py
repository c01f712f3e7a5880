"""Command-line entry point.

Subcommands::

    privicl classify   --exemplars E --queries Q --output R (--epsilon EPS | --sigma S)
    privicl esa        ... --n-candidates 4
    privicl ksa        ... --method {ptr,jem}
    privicl classify   ... --baseline {zero-shot,few-shot,aggregate}   (NOT PRIVATE)
    privicl calibrate  --mechanism {gaussian,em,ptr} --epsilon EPS --n-queries N
    privicl account    --ledger R.ledger.jsonl
    privicl score      --results R --references Q

Settings come from an optional ``--config`` TOML file; flags override it.
Exit codes: 0 ok, 2 budget exhausted, 3 backend failure, 4 configuration
error, 1 anything else.
"""

import argparse
import json
import logging
import sys
from collections.abc import Callable, Sequence
from enum import Enum
from pathlib import Path
from typing import Any

from src.privicl.cli.runner import PipelineRunner, account, calibrate, score
from src.privicl.core.backend import LLMBackend
from src.privicl.utils.config import (
    BackendKind,
    Baseline,
    KeywordDomain,
    PartitionScheme,
    RunConfig,
    TaskKind,
)
from src.privicl.utils.errors import (
    BackendError,
    BudgetExhaustedError,
    ConfigError,
    PrivICLError,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_BUDGET_EXHAUSTED = 2
EXIT_BACKEND_FAILURE = 3
EXIT_CONFIG_ERROR = 4

# Flag destination -> (RunConfig section or None for top level, field name)
_OVERRIDES: dict[str, tuple[str | None, str]] = {
    "seed": (None, "seed"),
    "exemplars": (None, "exemplar_path"),
    "queries": (None, "query_path"),
    "output": (None, "output_path"),
    "results": (None, "output_path"),
    "references": (None, "reference_path"),
    "ledger": (None, "ledger_path"),
    "n_queries": (None, "n_queries"),
    "n_candidates": (None, "n_candidates"),
    "max_tokens": (None, "max_tokens"),
    "parallel_queries": (None, "parallel_queries"),
    "resume": (None, "resume"),
    "privacy_off_debug": (None, "privacy_off_debug"),
    "mechanism": (None, "mechanism"),
    "baseline": (None, "baseline"),
    "epsilon": ("privacy", "epsilon"),
    "delta": ("privacy", "delta"),
    "sigma": ("privacy", "sigma"),
    "em_epsilon": ("privacy", "em_epsilon"),
    "ptr_sigma": ("privacy", "ptr_sigma"),
    "ptr_delta": ("privacy", "ptr_delta"),
    "sensitivity": ("privacy", "sensitivity"),
    "n_subsets": ("ensemble", "n_subsets"),
    "shots": ("ensemble", "shots_per_subset"),
    "subsample_rate": ("ensemble", "subsample_rate"),
    "partition": ("ensemble", "scheme"),
    "backend": ("backend", "kind"),
    "mock_table": ("backend", "mock_table"),
    "model": ("backend", "model_name"),
    "endpoint": ("backend", "endpoint_url"),
    "k": ("keywords", "k"),
    "k_min": ("keywords", "k_min"),
    "k_max": ("keywords", "k_max"),
    "domain": ("keywords", "domain"),
}


class _Parser(argparse.ArgumentParser):
    """Parser whose usage errors become configuration errors (exit 4, not 2)."""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise ConfigError(message)


def _enum_arg[E: Enum](enum: type[E]) -> Callable[[str], E]:
    def parse(value: str) -> E:
        try:
            return enum[value.upper().replace("-", "_")]
        except KeyError:
            choices = ", ".join(m.name.lower().replace("_", "-") for m in enum)
            raise argparse.ArgumentTypeError(f"invalid choice {value!r} (choose from {choices})")

    return parse


def build_parser() -> argparse.ArgumentParser:
    """Build the argument parser with all subcommands."""
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML configuration file")
    common.add_argument("--seed", type=int, help="base seed of the run")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    privacy = _Parser(add_help=False)
    group = privacy.add_argument_group("privacy")
    group.add_argument("--epsilon", type=float, help="target epsilon of the whole run")
    group.add_argument("--delta", type=float, help="target (or reporting) delta")
    group.add_argument("--sigma", type=float, help="explicit Gaussian noise std")
    group.add_argument("--em-epsilon", type=float, help="explicit epsilon per EM call")
    group.add_argument("--ptr-sigma", type=float, help="explicit noise of the PTR test")
    group.add_argument("--ptr-delta", type=float, help="failure probability of the PTR test")
    group.add_argument("--sensitivity", type=float, help="L2 sensitivity of Gaussian releases")

    ensemble = _Parser(add_help=False)
    group = ensemble.add_argument_group("ensemble")
    group.add_argument("--n-subsets", type=int, help="maximum ensemble size N")
    group.add_argument("--shots", type=int, help="exemplars per subset")
    group.add_argument("--subsample-rate", "-q", type=float, help="Poisson rate q")
    group.add_argument("--n-queries", type=int, help="declared query count for calibration")

    pipeline = _Parser(add_help=False)
    group = pipeline.add_argument_group("pipeline")
    group.add_argument("--exemplars", help="JSON-lines private exemplars")
    group.add_argument("--queries", help="JSON-lines queries")
    group.add_argument("--output", help="JSON-lines results; the ledger is written next to it")
    group.add_argument(
        "--backend", type=_enum_arg(BackendKind), metavar="{mock,http}", help="LLM backend"
    )
    group.add_argument("--mock-table", help="JSON prompt-suffix -> response table")
    group.add_argument("--model", help="completion model name")
    group.add_argument("--endpoint", help="base URL of an OpenAI-compatible API")
    group.add_argument("--template", help="prompt template preset")
    group.add_argument(
        "--partition", type=_enum_arg(PartitionScheme), metavar="{hashed,sequential}"
    )
    group.add_argument("--max-tokens", type=int, help="completion length")
    group.add_argument("--parallel-queries", type=int, help="queries processed concurrently")
    group.add_argument(
        "--baseline",
        type=_enum_arg(Baseline),
        metavar="{zero-shot,few-shot,aggregate}",
        help="answer with a non-private reference instead (NOT PRIVATE)",
    )
    group.add_argument("--resume", action="store_true", default=None, help="continue a run")
    group.add_argument(
        "--privacy-off-debug",
        action="store_true",
        default=None,
        help="write raw histograms to the results (NOT PRIVATE)",
    )

    parser = _Parser(prog="privicl", description="Differentially private in-context learning")
    sub = parser.add_subparsers(dest="command", required=True)
    run_parents = [common, privacy, ensemble, pipeline]

    sub.add_parser("classify", parents=run_parents, help="private label voting")

    esa = sub.add_parser("esa", parents=run_parents, help="embedding space aggregation")
    esa.add_argument("--n-candidates", type=int, help="zero-shot candidates per query")

    ksa = sub.add_parser("ksa", parents=run_parents, help="keyword space aggregation")
    ksa.add_argument("--method", choices=["ptr", "jem"], default="ptr")
    ksa.add_argument("--k", type=int, help="keywords released by joint EM")
    ksa.add_argument("--k-min", type=int, help="smallest k FindBestK may choose")
    ksa.add_argument("--k-max", type=int, help="largest k FindBestK may choose")
    ksa.add_argument(
        "--domain", type=_enum_arg(KeywordDomain), metavar="{responses,query}",
        help="joint EM candidate tokens",
    )

    cal = sub.add_parser("calibrate", parents=[common, privacy, ensemble], help="noise for a budget")
    cal.add_argument("--mechanism", choices=["gaussian", "em", "ptr"])

    acc = sub.add_parser("account", parents=[common, privacy], help="budget spent by a ledger")
    acc.add_argument("--ledger", help="ledger file")
    acc.add_argument("--output", help="results file whose ledger to read")

    sc = sub.add_parser("score", parents=[common], help="score results against references")
    sc.add_argument("--results", help="results file")
    sc.add_argument("--references", help="JSON-lines references")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    """Load the configuration file, if any, and apply flag overrides."""
    config = RunConfig.load(args.config) if args.config else RunConfig()

    match args.command:
        case "ksa":
            config.task = TaskKind.KSA_JEM if args.method == "jem" else TaskKind.KSA_PTR
        case command:
            config.task = TaskKind[command.upper()]

    for dest, (section, name) in _OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        target: Any = getattr(config, section) if section else config
        setattr(target, name, value)

    template = getattr(args, "template", None)
    if template is not None:
        if config.task is TaskKind.CLASSIFY:
            config.templates.classification = template
        else:
            config.templates.generation = template
    return config


def run(config: RunConfig, backend: LLMBackend | None = None) -> int:
    """Execute a configured task and return its exit code."""
    try:
        config.validate()
        match config.task:
            case TaskKind.CALIBRATE:
                for name, value in calibrate(config).items():
                    print(f"{name}={value:.6g}")
            case TaskKind.ACCOUNT:
                epsilon, delta = account(config)
                print(f"epsilon={epsilon:.4f} delta={delta:g}")
            case TaskKind.SCORE:
                report = score(config)
                print(json.dumps({k: round(v, 4) for k, v in report.summary().items()}))
            case _:
                runner = PipelineRunner(config, backend)
                try:
                    summary = runner.run()
                finally:
                    runner.close()
                print(
                    f"answered={summary.processed} fallbacks={summary.fallbacks} "
                    f"epsilon={summary.epsilon:.4f} delta={summary.delta:g}"
                )
    except BudgetExhaustedError as e:
        logger.error("%s", e)
        print(f"budget exhausted: epsilon={e.spent:.4f} target={e.target:.4f}")
        return EXIT_BUDGET_EXHAUSTED
    except BackendError as e:
        logger.error("Backend failure: %s", e)
        return EXIT_BACKEND_FAILURE
    except (ConfigError, FileNotFoundError) as e:
        logger.error("Configuration error: %s", e)
        return EXIT_CONFIG_ERROR
    except (PrivICLError, ValueError, OSError) as e:
        logger.error("%s: %s", type(e).__name__, e)
        return EXIT_ERROR
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    """Parse arguments, set up logging and run."""
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(
            level=logging.DEBUG if args.verbose else logging.INFO,
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
            stream=sys.stderr,
        )
        config = config_from_args(args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"privicl: {e}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    return run(config)
