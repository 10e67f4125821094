"""Result emission: CSV table, text matrix, rendered figures."""

from __future__ import annotations

import csv
from pathlib import Path

from .errors import ConfigError
from .experiment import Row

COLUMNS = ("mode", "consumers", "bytes", "cycles", "speedup_pct")


def fmt_bytes(n):
    """4096 -> '4 KiB', 1048576 -> '1 MiB'."""
    for unit, scale in (("GiB", 1 << 30), ("MiB", 1 << 20), ("KiB", 1 << 10)):
        if n % scale == 0 and n >= scale:
            return f"{n // scale} {unit}"
    return f"{n} B"


def _fmt_cycles(c):
    return str(int(c)) if float(c).is_integer() else f"{c:.3f}"


def write_csv(rows, path):
    """Emits the result table; identical rows give identical bytes."""
    if not rows:
        raise ConfigError("nothing to report: the sweep produced no rows")
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in rows:
            w.writerow((r.mode, r.consumers, r.nbytes,
                        _fmt_cycles(r.cycles), f"{r.speedup_pct:.6f}"))
    return Path(path)


def read_csv(path):
    """Parses a results file back into rows (the writer's inverse)."""
    rows = []
    with open(path, newline="") as f:
        rd = csv.reader(f)
        header = tuple(next(rd))
        if header != COLUMNS:
            raise ConfigError(f"{path}: unexpected columns {header}")
        for mode, consumers, nbytes, cycles, speedup in rd:
            c = float(cycles)
            rows.append(Row(mode, int(consumers), int(nbytes),
                            int(c) if c.is_integer() else c, float(speedup)))
    return rows


def _grid(rows):
    """(consumer counts, sizes, {(mode, n, size) -> row}) off a table."""
    counts = sorted({r.consumers for r in rows})
    sizes = sorted({r.nbytes for r in rows})
    cells = {(r.mode, r.consumers, r.nbytes): r for r in rows}
    return counts, sizes, cells


def _streamed(cells, n, size):
    row = cells.get(("p2p", n, size)) or cells.get(("multicast", n, size))
    if row is None:
        raise ConfigError(f"no streamed-mode row at consumers={n} "
                          f"bytes={size}")
    return row


def write_summary(rows, path, title="experiment sweep"):
    """Text report: a consumers x sizes speedup matrix plus raw cycles."""
    if not rows:
        raise ConfigError("nothing to report: the sweep produced no rows")
    counts, sizes, cells = _grid(rows)
    head = "consumers".ljust(15) + "".join(f"{fmt_bytes(s):>10}" for s in sizes)
    lines = [title, "",
             "speedup over the shared-memory baseline (percent)", head]
    for n in counts:
        cols = "".join(
            f"{_streamed(cells, n, s).speedup_pct:>10.1f}" for s in sizes)
        lines.append(f"{n:<4} {_streamed(cells, n, sizes[0]).mode:<10}" + cols)
    for mode_name, pick in (
            ("shared-memory", lambda n, s: cells[("shared-memory", n, s)]),
            ("streamed", lambda n, s: _streamed(cells, n, s))):
        lines += ["", f"end-to-end cycles, {mode_name}", head]
        for n in counts:
            cols = "".join(f"{_fmt_cycles(pick(n, s).cycles):>10}"
                           for s in sizes)
            lines.append(f"{n:<15}" + cols)
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)


def render_figures(rows, outdir):
    """Draws speedup-vs-consumers and speedup-vs-size charts as PNGs."""
    if not rows:
        raise ConfigError("nothing to plot: the sweep produced no rows")
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    counts, sizes, cells = _grid(rows)
    outdir = Path(outdir)
    paths = []

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for s in sizes:
        ys = [_streamed(cells, n, s).speedup_pct for n in counts]
        ax.plot(counts, ys, marker="o", label=fmt_bytes(s))
    ax.set_xscale("log", base=2)
    ax.set_xticks(counts, [str(n) for n in counts])
    ax.set_xlabel("consumers")
    ax.set_ylabel("speedup over shared memory (%)")
    ax.set_title("streamed transfers vs. shared-memory staging")
    ax.grid(True, alpha=0.3)
    ax.legend(title="dataset", fontsize=8)
    fig.tight_layout()
    p = outdir / "speedup_vs_consumers.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    paths.append(p)

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for n in counts:
        ys = [_streamed(cells, n, s).speedup_pct for s in sizes]
        ax.plot(sizes, ys, marker="s", label=f"{n} consumer{'s' * (n > 1)}")
    ax.set_xscale("log", base=2)
    ax.set_xticks(sizes, [fmt_bytes(s) for s in sizes], rotation=30)
    ax.set_xlabel("dataset size")
    ax.set_ylabel("speedup over shared memory (%)")
    ax.set_title("speedup across dataset sizes")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    p = outdir / "speedup_vs_size.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    paths.append(p)
    return paths
