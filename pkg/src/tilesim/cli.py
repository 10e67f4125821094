"""Command line: validate configs, run sweeps, write reports."""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from . import experiment, report
from .errors import CapacityError, ConfigError, SimulationError

EXIT_OK = 0
EXIT_CONFIG = 2      # bad usage, bad config, impossible sweep
EXIT_SIM = 3         # a simulation failed mid-sweep

PRESETS = ("esp-3x4", "calibrated-fig5", "demo-3x3")


def build_parser():
    p = argparse.ArgumentParser(
        prog="tilesim",
        description="Cycle-level sweeps of producer/consumer dataflows on a "
                    "tiled SoC: shared-memory staging vs. peer streams vs. "
                    "multicast.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a sweep and write reports")
    run.add_argument("--config", required=True,
                     help=f"config file, or a bundled preset: "
                          f"{', '.join(PRESETS)}")
    run.add_argument("--sweep", help="sweep file overriding the config's "
                                     "sweep section")
    run.add_argument("--out", default="results", help="output directory")
    run.add_argument("--trace", action="store_true",
                     help="write a per-point event trace (first repetition)")
    run.add_argument("--workers", type=int, default=1,
                     help="worker processes for parallel points")
    run.add_argument("--seed", type=int, default=0,
                     help="seed for the generated datasets")
    run.add_argument("--no-figures", action="store_true",
                     help="skip chart rendering")

    val = sub.add_parser("validate", help="check a config and print it")
    val.add_argument("--config", required=True,
                     help="config file or bundled preset name")
    return p


def _resolve_config(name):
    path = Path(name)
    if path.is_file():
        return path
    preset = experiment.preset_path(name)
    if preset is not None:
        return preset
    raise ConfigError(f"{name}: neither a config file nor one of the "
                      f"bundled presets ({', '.join(PRESETS)})")


def _describe(cfg, sweep):
    lines = [
        f"config:     {cfg.name}",
        f"mesh:       {cfg.noc.cols}x{cfg.noc.rows}, "
        f"{cfg.noc.flit_bits}-bit flits, "
        f"{cfg.noc.capacity()} multicast destinations max",
        f"memory:     tile ({cfg.mem_tile.x},{cfg.mem_tile.y}), "
        f"latency {cfg.mem.latency}, "
        f"bandwidth {cfg.mem.bandwidth} words/cycle",
        f"host:       tile ({cfg.host_tile.x},{cfg.host_tile.y}), "
        f"c_cfg {cfg.c_cfg}, c_irq {cfg.c_irq}",
        f"units:      {cfg.total_units} on {len(cfg.acc_tiles)} tiles, "
        f"chunk {cfg.chunk} B, local memory {cfg.plm_bytes} B",
        f"sweep:      consumers {list(sweep.consumers)}, sizes "
        f"{[report.fmt_bytes(s) for s in sweep.sizes]}, "
        f"repetitions {sweep.repetitions}",
    ]
    return "\n".join(lines)


def cmd_validate(args):
    cfg, sweep = experiment.load_config(_resolve_config(args.config))
    print(_describe(cfg, sweep))
    print("config ok")
    return EXIT_OK


def cmd_run(args):
    cfg, sweep = experiment.load_config(_resolve_config(args.config))
    if args.sweep:
        sweep = experiment.load_sweep(args.sweep, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trace_dir = None
    if args.trace:
        trace_dir = out / "traces"
        trace_dir.mkdir(exist_ok=True)
    print(_describe(cfg, sweep))
    t0 = time.monotonic()

    def progress(point, cycles):
        mode, n, size = point
        print(f"  [{time.monotonic() - t0:7.1f}s] {mode:<13} "
              f"consumers={n:<2} {report.fmt_bytes(size):>8}: "
              f"{cycles} cycles", flush=True)

    rows = experiment.run_sweep(cfg, sweep, seed=args.seed,
                                workers=max(1, args.workers),
                                trace_dir=str(trace_dir) if trace_dir else None,
                                progress=progress)
    written = [report.write_csv(rows, out / "results.csv"),
               report.write_summary(rows, out / "summary.txt",
                                    title=f"{cfg.name}: streamed transfers "
                                          f"vs. shared-memory staging")]
    if not args.no_figures:
        written += report.render_figures(rows, out)
    if trace_dir is not None:
        written.append(trace_dir)
    print((out / "summary.txt").read_text())
    print("wrote " + ", ".join(str(p) for p in written))
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args)
        return cmd_validate(args)
    except (ConfigError, CapacityError) as e:
        print(f"{parser.prog}: config error: {e}", file=sys.stderr)
        print(parser.format_usage().rstrip(), file=sys.stderr)
        return EXIT_CONFIG
    except SimulationError as e:
        print(f"{parser.prog}: simulation failed: {e}", file=sys.stderr)
        return EXIT_SIM


if __name__ == "__main__":
    sys.exit(main())
