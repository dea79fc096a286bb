"""Command-line entry point for the fluid twin pipeline."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Any, Dict, List, Optional

from fluid_twin.config import APP_NAME, APP_VERSION
from fluid_twin.config_service import ConfigService
from fluid_twin.errors import (
    CFLViolation,
    ConfigError,
    FluidTwinError,
    GridError,
    InputParseError,
    MissingInputError,
    ParticleBoundsError,
    PreconditionError,
    SimulationDiverged,
    TapeError,
)
from fluid_twin.logging_setup import configure_logging
from fluid_twin import pipeline

logger = logging.getLogger("fluid_twin.cli")

EXIT_USAGE = 1
EXIT_PARSE = 2
EXIT_NOT_CONVERGED = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(message)


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fluid_twin", description=f"{APP_NAME} {APP_VERSION}")
    parser.add_argument("--config", help="JSON configuration file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one configuration value (JSON-parsed)")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
    parser.add_argument("--log-json", default=None, metavar="PATH", help="append JSON-lines diagnostics to PATH")
    parser.add_argument("--print-default-config", action="store_true", help="print the reference configuration")

    commands = parser.add_subparsers(dest="command", parser_class=_Parser)

    recon = commands.add_parser("reconstruct", help="rasters + PLY frames -> velocity grids and asset")
    recon.add_argument("scene", help="scene.json listing flow/depth/mask rasters and PLY frames")
    recon.add_argument("out", help="output directory")

    kernel = commands.add_parser("fit-kernel", help="fit the recurrent pressure stencil to Jacobi pairs")
    kernel.add_argument("out", help="kernel JSON path")
    kernel.add_argument("--samples", type=int, default=32)
    kernel.add_argument("--iters", type=int, default=3)
    kernel.add_argument("--epochs", type=int, default=400)
    kernel.add_argument("--lr", type=float, default=0.05)

    opt = commands.add_parser("optimize", help="fit simulation parameters to guidance grids")
    opt.add_argument("guidance", help="directory holding cells.vgrd and velocity_*.vgrd")
    opt.add_argument("out", help="output directory for params.txt and loss.csv")
    opt.add_argument("--init", default=None, help="initial parameter document")

    sim = commands.add_parser("simulate", help="APIC re-simulation of an asset")
    sim.add_argument("asset", help="asset directory")
    sim.add_argument("out", help="trajectory output directory")
    sim.add_argument("--frames", type=int, default=30)
    sim.add_argument("--edit", action="append", default=[], metavar="NAME=VALUE", help="parameter edit (JSON value)")
    sim.add_argument("--force", action="store_true", help="run even when the edited parameters violate CFL")

    export = commands.add_parser("export", help="trajectory -> VGRD snapshots and summary CSV")
    export.add_argument("trajectory", help="trajectory directory")
    export.add_argument("out", help="output directory")
    return parser


def _parse_edits(items: List[str]) -> Dict[str, Any]:
    edits: Dict[str, Any] = {}
    for item in items:
        name, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"edit must look like name=value, got {item!r}")
        try:
            edits[name.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            raise UsageError(f"edit value for {name!r} is not valid JSON") from None
    return edits


def _run(args: argparse.Namespace) -> int:
    service = ConfigService(args.config)
    if args.print_default_config:
        print(json.dumps(service.reference(), indent=4, sort_keys=True))
        return 0
    config = service.load(args.config, args.overrides)
    log_cfg = config.section("logging")
    configure_logging(args.log_level or log_cfg["level"], args.log_json or log_cfg["json_lines"])

    if args.command == "reconstruct":
        return pipeline.cmd_reconstruct(args.scene, args.out, config)
    if args.command == "fit-kernel":
        return pipeline.cmd_fit_kernel(args.out, config, args.samples, args.iters, args.epochs, args.lr)
    if args.command == "optimize":
        return pipeline.cmd_optimize(args.guidance, args.out, config, args.init)
    if args.command == "simulate":
        return pipeline.cmd_simulate(args.asset, args.out, args.frames, config, _parse_edits(args.edit), args.force)
    if args.command == "export":
        return pipeline.cmd_export(args.trajectory, args.out)
    raise UsageError("a subcommand is required")


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        return _run(args)
    except UsageError as exc:
        print(f"[Usage] {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InputParseError, MissingInputError) as exc:
        print(f"[Input] {exc}", file=sys.stderr)
        return EXIT_PARSE
    except SimulationDiverged as exc:
        print(f"[Diverged] {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    except CFLViolation as exc:
        print(f"[CFL] {exc}; pass --force to run anyway", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, GridError, ParticleBoundsError, PreconditionError, TapeError) as exc:
        print(f"[Error] {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FluidTwinError, ValueError) as exc:  # noqa: PERF203
        print(f"[Error] {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
