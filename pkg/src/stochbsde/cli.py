"""Command line front-end: ``stochbsde run|validate|list-presets``.

Exit codes: 0 all checks passed, 1 some check failed, 2 configuration or
runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
import traceback
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import ValidationError
from threadpoolctl import threadpool_limits

from . import __version__
from .conditional import STATE_MAPS
from .config import KINDS, STOPPING_PRESETS, TERMINAL_PRESETS, ExperimentConfig, load_config
from .experiments import run_experiment
from .generators import GENERATOR_PRESETS
from .io import process_to_csv, save_fields, write_table
from .paths import AdaptedProcess
from .sfuncs import RHO_PRESETS

EXIT_OK, EXIT_FAILED, EXIT_ERROR = 0, 1, 2
DEFAULT_OUTPUT_DIR = "stochbsde-out"
CSV_PATHS = 100


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    if hasattr(obj, "as_dict"):
        return _jsonable(obj.as_dict())
    return obj


def list_presets() -> str:
    sections = {
        "experiments": KINDS,
        "generators": GENERATOR_PRESETS,
        "rho": RHO_PRESETS,
        "state maps": tuple(STATE_MAPS),
        "stopping": STOPPING_PRESETS,
        "terminal": TERMINAL_PRESETS,
    }
    lines = []
    for title in sorted(sections):
        lines.append(f"{title}:")
        lines.extend(f"  {name}" for name in sorted(sections[title]))
    return "\n".join(lines) + "\n"


def _format_validation(err: ValidationError) -> str:
    return "\n".join(f"{'.'.join(str(p) for p in e['loc']) or '<root>'}: {e['msg']}" for e in err.errors())


def write_manifest(manifest: dict, out_dir: Path) -> Path:
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(_jsonable(manifest), indent=2, sort_keys=True) + "\n")
    return path


def run(cfg: ExperimentConfig, out_dir: Optional[Path] = None, threads: int = 1, export_paths: int = 1000):
    """Execute one experiment and write its outputs; returns ``(manifest, exit_code)``."""
    out_dir = Path(out_dir or cfg.output_dir or DEFAULT_OUTPUT_DIR)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "library": {"name": "stochbsde", "version": __version__},
        "config": cfg.model_dump(mode="json"),
        "seed": cfg.seed,
        "kind": cfg.kind,
    }
    timings = {}
    t0 = time.perf_counter()
    try:
        # BLAS splits reductions across its threads, which changes rounding; path
        # generation is the only parallel stage so results stay thread-count free
        with threadpool_limits(limits=1):
            outcome = run_experiment(cfg, threads, export_paths)
        timings["experiment_s"] = time.perf_counter() - t0
        t1 = time.perf_counter()
        outputs = []
        for name, rows in sorted(outcome.tables.items()):
            write_table(out_dir / f"{name}.csv", rows)
            outputs.append(f"{name}.csv")
        if outcome.fields and outcome.ensemble is not None:
            save_fields(outcome.ensemble, outcome.fields, out_dir / "fields.bin")
            outputs.append("fields.bin")
            if "Y" in outcome.fields:
                Y = AdaptedProcess(outcome.ensemble.with_increments(outcome.ensemble.increments[: outcome.fields["Y"].shape[0]]),
                                   outcome.fields["Y"])
                process_to_csv(Y, out_dir / "Y_paths.csv", max_paths=CSV_PATHS)
                outputs.append("Y_paths.csv")
        timings["write_s"] = time.perf_counter() - t1
        failed = sorted(k for k, v in outcome.checks.items() if not v)
        manifest.update({
            "checks": outcome.checks,
            "reports": outcome.reports,
            "outputs": sorted(outputs),
            "summary": {"passed": not failed, "n_checks": len(outcome.checks), "failed": failed},
            "status": "passed" if not failed else "failed",
        })
        code = EXIT_OK if not failed else EXIT_FAILED
    except Exception as exc:  # runtime errors go into the manifest
        manifest.update({
            "status": "error",
            "error": {"type": type(exc).__name__, "message": str(exc), "traceback": traceback.format_exc()},
            "summary": {"passed": False, "n_checks": 0, "failed": []},
        })
        code = EXIT_ERROR
    timings["total_s"] = time.perf_counter() - t0
    manifest["timings"] = timings
    write_manifest(manifest, out_dir)
    return manifest, code


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    # accepted before or after the subcommand; the subcommand copy only sets what was given
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--threads", type=int, default=d(1), help="path-generation workers; results do not depend on it")
    parser.add_argument("--output-dir", default=d(None), help="overrides the config's output_dir")
    parser.add_argument("--seed", type=int, default=d(None), help="overrides the config's seed")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stochbsde", description="Monte Carlo BSDE solver and inequality checks")
    _global_flags(p, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", parents=[common], help="run an experiment config")
    r.add_argument("config")
    r.add_argument("--export-paths", type=int, default=1000, help="paths written to fields.bin")
    v = sub.add_parser("validate", parents=[common], help="validate a config without running it")
    v.add_argument("config")
    sub.add_parser("list-presets", parents=[common], help="list registry names")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "list-presets":
        sys.stdout.write(list_presets())
        return EXIT_OK
    try:
        cfg = load_config(args.config, args.seed)
    except ValidationError as err:
        sys.stderr.write(f"invalid config {args.config}:\n{_format_validation(err)}\n")
        return EXIT_ERROR
    except (OSError, ValueError) as err:
        sys.stderr.write(f"cannot read config {args.config}: {err}\n")
        return EXIT_ERROR
    if args.command == "validate":
        sys.stdout.write(f"{args.config}: ok ({cfg.kind})\n")
        return EXIT_OK
    manifest, code = run(cfg, args.output_dir, args.threads, args.export_paths)
    status = manifest["status"]
    failed = manifest["summary"]["failed"]
    sys.stdout.write(f"{cfg.kind}: {status}" + (f" ({', '.join(failed)})" if failed else "") + "\n")
    if status == "error":
        sys.stderr.write(manifest["error"]["message"] + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
