"""Command-line entry point: ``ageatlas <stage> [options]``."""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from .config import load_config
from .errors import (
    AgeAtlasError,
    ConfigError,
    MissingArtifactError,
    NumericalError,
    SubjectFailureError,
)
from .pipeline import RUN_ALL, Layout, StageReceipt, run_stage

STAGE_HELP = {
    "phantom": "Generate the synthetic cohort, its ground-truth masks and manifest",
    "train": "Train the age regressor on the train split (val split drives the scheduler)",
    "predict": "Store raw age predictions for every subject",
    "bias": "Fit the linear bias correction on the val split and correct all predictions",
    "cam": "Extract a Grad-CAM importance volume per test subject",
    "register": "Register every test subject to its sex x BMI group target",
    "atlas": "Average warped images and CAMs into group, age-band and gap-band atlases",
    "report": "Write metrics, scatter and localization tables and the figures",
    "baseline25d": "Train and evaluate the projection (2.5D) baseline",
    "run-all": "Run " + " -> ".join(RUN_ALL),
}


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "-c", "--config", help="JSON run configuration (defaults apply when omitted)"
    )
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override a config field, e.g. --set train.epochs=5 "
        "(repeatable; value parsed as JSON)",
    )
    common.add_argument(
        "-j", "--jobs", type=int, default=1, help="Worker threads per stage (default: 1, bit-exact)"
    )
    common.add_argument(
        "-f", "--force", action="store_true", help="Run even if the stage receipt is up to date"
    )
    common.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ageatlas",
        description="Age regression, Grad-CAM importance maps and group atlases "
        "on a synthetic cohort",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="Exit codes: 0 success, 2 config error, 3 missing artifact, 4 numerical failure,\n"
        "5 some subjects failed in a batch stage.\n"
        "AGEATLAS_OUTPUT_ROOT overrides output_root.",
    )
    sub = parser.add_subparsers(dest="stage", metavar="STAGE", required=True)
    common = _common_options()
    for name, text in STAGE_HELP.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


def _print_receipt(receipt: StageReceipt, layout: Layout) -> None:
    details = ", ".join(f"{k}={v}" for k, v in receipt.summary.items() if not isinstance(v, dict))
    print(f"[{receipt.stage}] {details}" if details else f"[{receipt.stage}] done")
    print(f"Saved: {layout.receipt(receipt.stage)}", file=sys.stderr)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )

    try:
        if args.jobs < 1:
            raise ConfigError(f"--jobs must be at least 1, got {args.jobs}")
        config = load_config(args.config, args.overrides)
        layout = Layout(Path(config.output_root))
        stages: List[str] = list(RUN_ALL) if args.stage == "run-all" else [args.stage]
        for stage in stages:
            _print_receipt(run_stage(config, stage, args.jobs, args.force), layout)
        if "report" in stages and (layout.reports / "metrics.txt").exists():
            print("\n" + (layout.reports / "metrics.txt").read_text(encoding="utf-8"))

    except ConfigError as e:
        print(f"Configuration Error: {e}", file=sys.stderr)
        sys.exit(e.exit_code)
    except MissingArtifactError as e:
        print(f"Missing Artifact: {e}", file=sys.stderr)
        sys.exit(e.exit_code)
    except NumericalError as e:
        print(f"Numerical Error: {e}", file=sys.stderr)
        sys.exit(e.exit_code)
    except SubjectFailureError as e:
        print(f"Partial Failure: {e}", file=sys.stderr)
        sys.exit(e.exit_code)
    except AgeAtlasError as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(e.exit_code)
    except ValueError as e:
        print(f"Input Error: {e}", file=sys.stderr)
        sys.exit(1)
    except KeyboardInterrupt:
        print("\nInterrupted by user", file=sys.stderr)
        sys.exit(130)
    return 0


if __name__ == "__main__":
    main()
