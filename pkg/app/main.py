"""
Command-line entry point: ``python -m app.main <command> [flags]``.

Every run configuration field is a ``--field-name`` flag. Values resolve as
field defaults < ``--config`` file < flags.
"""
import argparse
import logging
import sys
from typing import Callable, Dict, List, Optional

from threadpoolctl import threadpool_limits

from app.core.config import Settings, settings
from app.core.error_handling import EXIT_OK, cli_error_handler
from app.core.logger import get_logger_with_context, setup_logging
from app.core.run_config import RunConfig, load_config_file, resolve_run_config
from app.services import experiments

logger = logging.getLogger(__name__)


def _gen_data(config: RunConfig) -> None:
    manifest = experiments.run_generate(config)
    print(f"wrote {len(manifest.entries)} records to {manifest.root}")


def _train(config: RunConfig) -> None:
    results = experiments.run_training(config)
    for name, result in results.items():
        label = f"{name}: " if name else ""
        print(f"{label}best epoch {result.best_epoch} val_loss {result.best_val_loss:.6f}")


def _eval(config: RunConfig) -> None:
    report = experiments.run_evaluation(config)
    print(report.to_frame().to_string(index=False, float_format="%.4f"))


def _ablate(config: RunConfig) -> None:
    summary = experiments.run_ablation_matrix(config)
    print(summary.groupby("variant", sort=False)["mean_metric"].mean().to_string(float_format="%.4f"))


def _viz(config: RunConfig) -> None:
    summary = experiments.run_visualization(config)
    print(f"attention artifacts written for case {summary['case_id']}")


COMMANDS: Dict[str, Callable[[RunConfig], None]] = {
    "gen-data": _gen_data,
    "train": _train,
    "eval": _eval,
    "ablate": _ablate,
    "viz": _viz,
}

COMMAND_HELP = {
    "gen-data": "write a synthetic planted-signal dataset to --data-dir",
    "train": "train --model (or an --ablation) into --out-dir",
    "eval": "bootstrap metrics on the test split of a trained run",
    "ablate": "train and evaluate every ablation over --seeds seeds",
    "viz": "attention rollout, shares and heatmaps for one case",
}


def _field_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("run configuration")
    for name, field in RunConfig.model_fields.items():
        annotation = getattr(field.annotation, "__name__", None) or "value"
        group.add_argument(
            "--" + name.replace("_", "-"),
            dest=name,
            default=argparse.SUPPRESS,
            metavar=annotation.upper() if annotation in ("int", "float", "str", "bool") else "VALUE",
            help=f"default: {field.default}",
        )


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, metavar="PATH",
                        help="flat key=value run configuration file")
    common.add_argument("--log-level", default=argparse.SUPPRESS, help="override LOG_LEVEL")
    common.add_argument("--json-logs", action=argparse.BooleanOptionalAction, default=argparse.SUPPRESS,
                        help="JSON log lines on stderr")
    _field_flags(common)

    parser = argparse.ArgumentParser(prog="python -m app.main",
                                     description="Multimodal diagnostic transformer toolkit")
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, help_text in COMMAND_HELP.items():
        subparsers.add_parser(name, parents=[common], help=help_text, description=help_text)
    return parser


def _process_settings(log_level: Optional[str], json_logs: Optional[bool]) -> Settings:
    overrides = {}
    if log_level is not None:
        overrides["LOG_LEVEL"] = log_level
    if json_logs is not None:
        overrides["LOG_JSON"] = json_logs
    if not overrides:
        return settings
    return Settings(**{**settings.model_dump(), **overrides})


@cli_error_handler
def run_command(args: argparse.Namespace) -> int:
    values = dict(vars(args))
    command = values.pop("command")
    config_path = values.pop("config", None)
    process_settings = _process_settings(values.pop("log_level", None), values.pop("json_logs", None))
    setup_logging(process_settings)

    file_values = load_config_file(config_path) if config_path else {}
    config = resolve_run_config(file_values, values)
    log = get_logger_with_context(__name__, command=command, model=config.model)
    log.info(f"🚀 {command} (seed {config.seed})")

    with threadpool_limits(limits=process_settings.MDT_THREADS):
        COMMANDS[command](config)
    log.info(f"✅ {command} finished")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return run_command(args)


if __name__ == "__main__":
    sys.exit(main())
