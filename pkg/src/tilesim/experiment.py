"""Producer/multi-consumer experiment harness.

Builds a whole SoC instance (mesh, memory tile, host tile, accelerator
sockets) and runs an identity dataflow of one producer and N consumers in
three modes: staged through shared memory, streamed to a single peer, or
multicast to the whole group. The measured quantity is end-to-end cycles
from the first invocation to the last handled completion; speedups compare
the streamed modes against the shared-memory baseline at the same point.
"""

from __future__ import annotations

import json
import random
from collections import deque
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path

from .accel import AccUnit, Job
from .errors import (BusyError, CapacityError, ConfigError, ProtocolError,
                     SimulationError, WatchdogError)
from .memsys import MemConfig, MemCtrl, PagedStore
from .noc import Coord, Mesh, MsgType, NocConfig
from .simkernel import Component, Kernel, RunStats
from .socket import SocketBank

# Physical layout of one experiment: the producer's input buffer, the
# baseline's staging buffer, and one output buffer per consumer.
R_INPUT = 16 << 20
R_STAGE = 64 << 20
R_OUT = 128 << 20
R_OUT_STRIDE = 8 << 20
# Units address their buffers through two virtual windows.
V_SRC = 0
V_DST = 1 << 32

MODES = ("shared-memory", "p2p", "multicast")


@dataclass
class SocConfig:
    """Everything needed to build one SoC instance."""

    noc: NocConfig = field(default_factory=NocConfig)
    mem: MemConfig = field(default_factory=MemConfig)
    mem_tile: Coord = Coord(0, 0)
    host_tile: Coord = Coord(1, 0)
    acc_tiles: tuple = ()       # ((Coord, unit count), ...)
    c_cfg: int = 2000           # host cycles to configure one invocation
    c_irq: int = 3000           # host cycles to handle one completion
    chunk: int = 4096           # bytes staged per transfer burst
    plm_bytes: int = 8192       # local memory per unit (two chunk buffers)
    name: str = "soc"

    def __post_init__(self):
        grid = [Coord(x, y) for y in range((self.noc.rows))
                for x in range(self.noc.cols)]
        for role, t in (("memory", self.mem_tile), ("host", self.host_tile)):
            if t not in grid:
                raise ConfigError(f"{role} tile {t} outside the mesh")
        if self.mem_tile == self.host_tile:
            raise ConfigError("memory and host cannot share a tile")
        if not self.acc_tiles:
            # every remaining tile runs one unit unless told otherwise
            self.acc_tiles = tuple(
                (t, 1) for t in grid
                if t not in (self.mem_tile, self.host_tile))
        self.acc_tiles = tuple((Coord(*t), int(n)) for t, n in self.acc_tiles)
        seen = set()
        for t, count in self.acc_tiles:
            if t not in grid:
                raise ConfigError(f"accelerator tile {t} outside the mesh")
            if t in (self.mem_tile, self.host_tile) or t in seen:
                raise ConfigError(f"tile {t} assigned twice")
            seen.add(t)
            if count < 1:
                raise ConfigError(f"tile {t} declares {count} units")
        if self.chunk <= 0 or self.chunk % 8:
            raise ConfigError("chunk must be a positive number of words")
        if 2 * self.chunk > self.plm_bytes:
            raise ConfigError(
                f"plm_bytes={self.plm_bytes} cannot double-buffer "
                f"{self.chunk}-byte chunks")
        if self.c_cfg < 0 or self.c_irq < 0:
            raise ConfigError("host costs cannot be negative")

    def unit_slots(self):
        """Units in round-robin tile order: nearby slots on distinct tiles."""
        out = []
        k = 0
        while True:
            row = [(t, k) for t, count in self.acc_tiles if k < count]
            if not row:
                return tuple(out)
            out.extend(row)
            k += 1

    @property
    def total_units(self):
        return sum(n for _, n in self.acc_tiles)


@dataclass
class SweepSpec:
    """The grid of experiment points to measure."""

    consumers: tuple = (1, 2, 4, 8, 16)
    sizes: tuple = (4 << 10, 16 << 10, 64 << 10, 256 << 10, 1 << 20, 4 << 20)
    repetitions: int = 1

    def __post_init__(self):
        self.consumers = tuple(int(n) for n in self.consumers)
        self.sizes = tuple(int(s) for s in self.sizes)
        if self.repetitions < 1:
            raise ConfigError("repetitions must be at least 1")


def validate_sweep(cfg, sweep):
    """Checks every sweep point builds a legal workload for this SoC."""
    if not sweep.consumers or not sweep.sizes:
        raise ConfigError("empty sweep: need at least one consumer count "
                          "and one data size")
    for n in sweep.consumers:
        if n < 1:
            raise ConfigError(f"consumer count {n} is not positive")
        if n + 1 > cfg.total_units:
            raise ConfigError(
                f"{n} consumers plus a producer exceed the "
                f"{cfg.total_units} configured units")
        if n >= 2 and n > cfg.noc.capacity():
            raise CapacityError(
                f"{n} consumers in multicast mode exceed the header "
                f"capacity of {cfg.noc.capacity()} destinations")
    for s in sweep.sizes:
        if s <= 0 or s % 8:
            raise ConfigError(f"data size {s} is not a whole word count")


# ----------------------------------------------------------- config files

_TOP_KEYS = {"name", "mesh", "memory", "host", "accel", "sweep"}
_MESH_KEYS = {"cols", "rows", "flit_bits", "fifo_depth", "max_mcast", "planes"}
_MEM_KEYS = {"tile", "latency", "bandwidth"}
_HOST_KEYS = {"tile", "c_cfg", "c_irq"}
_ACC_KEYS = {"tiles", "chunk", "plm_bytes"}
_SWEEP_KEYS = {"consumers", "sizes", "repetitions"}


def _check_keys(doc, allowed, where):
    for k in doc:
        if k not in allowed:
            raise ConfigError(f"{where}: unknown key {k!r} "
                              f"(expected one of {sorted(allowed)})")


def _coord(v, where):
    if (not isinstance(v, (list, tuple)) or len(v) != 2
            or not all(isinstance(c, int) for c in v)):
        raise ConfigError(f"{where}: expected a [x, y] pair, got {v!r}")
    return Coord(v[0], v[1])


def config_from_dict(doc, where="config"):
    """Builds (SocConfig, SweepSpec) out of parsed JSON."""
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: top level must be an object")
    _check_keys(doc, _TOP_KEYS, where)
    mesh = doc.get("mesh", {})
    _check_keys(mesh, _MESH_KEYS, f"{where}.mesh")
    noc = NocConfig(cols=mesh.get("cols", 3), rows=mesh.get("rows", 4),
                    flit_bits=mesh.get("flit_bits", 256),
                    fifo_depth=mesh.get("fifo_depth", 4),
                    max_mcast=mesh.get("max_mcast", 16),
                    planes=mesh.get("planes", 3))
    memd = doc.get("memory", {})
    _check_keys(memd, _MEM_KEYS, f"{where}.memory")
    try:
        bw = Fraction(str(memd.get("bandwidth", 1)))
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"{where}.memory.bandwidth: "
                          f"{memd.get('bandwidth')!r} is not a ratio") from None
    mem = MemConfig(latency=memd.get("latency", 60), bandwidth=bw)
    hostd = doc.get("host", {})
    _check_keys(hostd, _HOST_KEYS, f"{where}.host")
    accd = doc.get("accel", {})
    _check_keys(accd, _ACC_KEYS, f"{where}.accel")
    acc_tiles = ()
    if "tiles" in accd:
        rows = accd["tiles"]
        if not isinstance(rows, list) or not rows:
            raise ConfigError(f"{where}.accel.tiles: expected a nonempty list")
        acc_tiles = []
        for i, row in enumerate(rows):
            if not (isinstance(row, list) and len(row) == 3):
                raise ConfigError(f"{where}.accel.tiles[{i}]: expected "
                                  f"[x, y, units], got {row!r}")
            acc_tiles.append((_coord(row[:2], f"{where}.accel.tiles[{i}]"),
                              row[2]))
    cfg = SocConfig(
        noc=noc, mem=mem,
        mem_tile=_coord(memd.get("tile", [0, 0]), f"{where}.memory.tile"),
        host_tile=_coord(hostd.get("tile", [1, 0]), f"{where}.host.tile"),
        acc_tiles=tuple(acc_tiles),
        c_cfg=hostd.get("c_cfg", 2000), c_irq=hostd.get("c_irq", 3000),
        chunk=accd.get("chunk", 4096),
        plm_bytes=accd.get("plm_bytes", 8192),
        name=doc.get("name", "soc"))
    sweep = sweep_from_dict(doc.get("sweep", {}), f"{where}.sweep")
    validate_sweep(cfg, sweep)
    return cfg, sweep


def sweep_from_dict(doc, where="sweep"):
    _check_keys(doc, _SWEEP_KEYS, where)
    kw = {}
    if "consumers" in doc:
        kw["consumers"] = doc["consumers"]
    if "sizes" in doc:
        kw["sizes"] = doc["sizes"]
    kw["repetitions"] = doc.get("repetitions", 1)
    return SweepSpec(**kw)


def _parse_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such config file") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None


def load_config(path):
    """Parses and fully validates a config file; (SocConfig, SweepSpec)."""
    return config_from_dict(_parse_json(path), where=str(path))


def load_sweep(path, cfg):
    """Parses a standalone sweep file against an existing SocConfig."""
    sweep = sweep_from_dict(_parse_json(path), where=str(path))
    validate_sweep(cfg, sweep)
    return sweep


def preset_path(name):
    """Filesystem path of a bundled preset; None when unknown."""
    ref = resources.files("tilesim") / "presets" / f"{name}.json"
    return ref if ref.is_file() else None


# ------------------------------------------------------------- the host

class Host(Component):
    """Fixed-cost invocation engine on the CPU tile.

    Configuring one invocation occupies the host for c_cfg cycles before
    the job reaches its socket; completion interrupts are handled in
    parallel, each costing c_irq cycles after arrival. Phases serialize:
    jobs of phase k+1 are configured only once the last interrupt of phase
    k has been handled.
    """

    def __init__(self, kern, mesh, tile, c_cfg=2000, c_irq=3000):
        self.name = f"host({tile.x},{tile.y})"
        self.kern = kern
        self.mesh = mesh
        self.tile = tile
        self.c_cfg = c_cfg
        self.c_irq = c_irq
        self.nic = mesh.nics[tile]
        self.rx = self.nic.bind_sink(self)
        self.phases = deque()
        self._plan = deque()      # configs left in the running phase
        self._send_at = 0         # cycle the next config may be sent
        self._running = set()     # (tile, unit) invoked, completion pending
        self.irq_log = []         # (arrival cycle, tile, unit)
        self.end_cycle = 0

    def schedule(self, phases):
        """Queues phases, each a list of (tile, unit index, Job)."""
        assert phases and all(phases), "every phase needs an invocation"
        self.phases = deque(phases)
        self._start_phase(0)

    def _start_phase(self, cyc):
        self._plan = deque(self.phases.popleft())
        self._send_at = cyc + self.c_cfg
        self.kern.wake_at(self, self._send_at)

    def evaluate(self, cyc):
        for dq in self.rx:
            if not dq.q:
                continue
            for ev in dq.drain():
                if ev[0] != "pkt" or ev[1].msg_type != MsgType.IRQ:
                    continue
                _, tile, uidx = ev[1].meta
                if (tile, uidx) not in self._running:
                    raise ProtocolError(
                        f"{self.name}: stray completion from {tile} "
                        f"unit {uidx}")
                self._running.discard((tile, uidx))
                self.irq_log.append((cyc, tile, uidx))
                self.end_cycle = max(self.end_cycle, cyc + self.c_irq)
        if not self._running and not self._plan and self.phases:
            self._start_phase(cyc + self.c_irq)
        if self._plan and cyc >= self._send_at:
            tile, uidx, job = self._plan.popleft()
            if (tile, uidx) in self._running:
                raise BusyError(
                    f"{self.name}: unit {uidx} on {tile} is still running")
            self._running.add((tile, uidx))
            self.nic.send(self.mesh.packet(
                MsgType.CONFIG, self.tile, (tile,), meta=("cfg", uidx, job)))
            if self._plan:
                self._send_at = cyc + self.c_cfg
                self.kern.wake_at(self, self._send_at)

    def snapshot(self):
        return (len(self.phases), len(self._plan), self._send_at,
                tuple(sorted(self._running)), self.end_cycle)


# ------------------------------------------------------- a wired instance

class SocInstance:
    """One fully wired SoC ready to run a workload."""

    def __init__(self, cfg, shuffle_seed=None, detail=False):
        self.cfg = cfg
        self.kern = Kernel(shuffle_seed)
        self.stats = RunStats(detail=detail)
        self.mesh = Mesh(self.kern, cfg.noc, self.stats)
        self.store = PagedStore()
        self.mem = self.kern.add(
            MemCtrl(self.kern, self.mesh, cfg.mem_tile, cfg.mem, self.store))
        self.host = self.kern.add(
            Host(self.kern, self.mesh, cfg.host_tile, cfg.c_cfg, cfg.c_irq))
        self.banks = {}
        for tile, _ in cfg.acc_tiles:
            bank = self.kern.add(
                SocketBank(self.kern, self.mesh, tile, cfg.host_tile))
            bank.mem_tile = cfg.mem_tile
            self.banks[tile] = bank
        self.units = []
        for tile, k in cfg.unit_slots():
            uctx = self.banks[tile].add_unit()
            self.kern.add(AccUnit(
                self.kern, f"acc({tile.x},{tile.y}).u{uctx.idx}", uctx,
                cfg.plm_bytes))
            self.units.append((tile, uctx.idx))

    def run(self, max_cycles=10 ** 9):
        """Runs to quiescence; raises if the workload did not finish."""
        end = self.kern.run(max_cycles)
        h = self.host
        if h.phases or h._plan or h._running:
            stuck = ", ".join(f"{t} unit {u}" for t, u in sorted(h._running))
            raise WatchdogError(
                f"workload stalled with no activity left (waiting on "
                f"{stuck or 'unconfigured phases'})\n{self.kern.diagnose()}")
        return end


# ------------------------------------------------------------- workloads

def accelerated_mode(consumers):
    """The streamed mode measured against the baseline at this fan-out."""
    return "p2p" if consumers == 1 else "multicast"


def build_phases(cfg, mode, consumers, nbytes):
    """Host schedule for one experiment point."""
    slots = cfg.unit_slots()
    if consumers + 1 > len(slots):
        raise ConfigError(f"{consumers} consumers need {consumers + 1} "
                          f"units; only {len(slots)} configured")
    ptile, pk = slots[0]
    cons = slots[1:consumers + 1]
    chunk = cfg.chunk

    def out_region(j):
        return (V_DST, R_OUT + j * R_OUT_STRIDE, nbytes)

    if mode == "shared-memory":
        produce = Job(V_SRC, V_DST, nbytes, chunk=chunk,
                      regions=((V_SRC, R_INPUT, nbytes),
                               (V_DST, R_STAGE, nbytes)))
        consume = [
            (t, k, Job(V_SRC, V_DST, nbytes, chunk=chunk,
                       regions=((V_SRC, R_STAGE, nbytes), out_region(j))))
            for j, (t, k) in enumerate(cons)]
        return [[(ptile, pk, produce)], consume]
    produce = Job(V_SRC, V_DST, nbytes, write_user=consumers, chunk=chunk,
                  regions=((V_SRC, R_INPUT, nbytes),))
    consume = [
        (t, k, Job(V_SRC, V_DST, nbytes, read_user=1, chunk=chunk,
                   regions=(out_region(j),), lut=((1, ptile),)))
        for j, (t, k) in enumerate(cons)]
    return [[(ptile, pk, produce)] + consume]


def run_point(cfg, mode, consumers, nbytes, seed=0, shuffle_seed=None,
              detail=False, max_cycles=10 ** 9):
    """Simulates one point; returns (end-to-end cycles, SocInstance)."""
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r} (one of {MODES})")
    if mode == "p2p" and consumers != 1:
        raise ConfigError("a peer stream has exactly one consumer")
    if mode == "multicast" and not 2 <= consumers <= cfg.noc.capacity():
        raise CapacityError(
            f"multicast to {consumers} consumers outside the supported "
            f"2..{cfg.noc.capacity()} range")
    if nbytes <= 0 or nbytes % 8:
        raise ConfigError(f"dataset of {nbytes} bytes is not a word multiple")
    soc = SocInstance(cfg, shuffle_seed=shuffle_seed, detail=detail)
    payload = random.Random(seed).randbytes(nbytes)
    soc.store.write(R_INPUT, payload)
    soc.host.schedule(build_phases(cfg, mode, consumers, nbytes))
    try:
        soc.run(max_cycles)
    except SimulationError as e:
        raise type(e)(f"at mode={mode} consumers={consumers} "
                      f"bytes={nbytes}: {e}") from e
    for j in range(consumers):
        if soc.store.read(R_OUT + j * R_OUT_STRIDE, nbytes) != payload:
            raise ProtocolError(
                f"consumer {j} output differs from the input at "
                f"mode={mode} consumers={consumers} bytes={nbytes}")
    if mode == "shared-memory" and soc.store.read(R_STAGE, nbytes) != payload:
        raise ProtocolError(
            f"staging buffer differs from the input at bytes={nbytes}")
    return soc.host.end_cycle, soc


# ----------------------------------------------------------------- sweeps

@dataclass(frozen=True)
class Row:
    """One emitted result line."""

    mode: str
    consumers: int
    nbytes: int
    cycles: float
    speedup_pct: float


def _row_key(row):
    return (row.consumers, row.nbytes, row.mode != "shared-memory", row.mode)


def _measure(cfg, mode, consumers, nbytes, seed, reps, trace_dir=None):
    """Mean cycles over repetitions (worker-process entry point)."""
    total = 0
    for r in range(reps):
        detail = bool(trace_dir) and r == 0
        cycles, soc = run_point(cfg, mode, consumers, nbytes,
                                seed=seed + r, detail=detail)
        total += cycles
        if detail:
            _write_trace(soc, Path(trace_dir) /
                         f"trace-{mode}-n{consumers}-{nbytes}.log")
    return total // reps if total % reps == 0 else total / reps


def _write_trace(soc, path):
    """Newline-delimited event records of one run."""
    st = soc.stats
    with open(path, "w") as f:
        for pid, cyc in sorted(st.injections.items(), key=lambda kv: kv[1]):
            f.write(f"inject cycle={cyc} pid={pid}\n")
        for cyc, x, y, pid, seq, kind in st.deliveries:
            f.write(f"deliver cycle={cyc} tile=({x},{y}) pid={pid} "
                    f"seq={seq} kind={kind}\n")
        for pid, arrival, start, first, last in st.port_log:
            f.write(f"port pid={pid} arrival={arrival} start={start} "
                    f"first={first} last={last}\n")
        for cyc, tile, uidx in soc.host.irq_log:
            f.write(f"irq cycle={cyc} tile=({tile.x},{tile.y}) "
                    f"unit={uidx}\n")


def run_sweep(cfg, sweep, seed=0, workers=1, trace_dir=None, progress=None):
    """Measures every sweep point; returns rows sorted canonically.

    Each point owns its SocInstance, so points run in parallel across
    worker processes when workers > 1.
    """
    validate_sweep(cfg, sweep)
    points = []
    for n in sweep.consumers:
        for size in sweep.sizes:
            points.append(("shared-memory", n, size))
            points.append((accelerated_mode(n), n, size))
    results = {}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(points))) as ex:
            futs = {
                ex.submit(_measure, cfg, m, n, s, seed, sweep.repetitions,
                          trace_dir): (m, n, s)
                for m, n, s in points}
            for fut in as_completed(futs):
                key = futs[fut]
                results[key] = fut.result()
                if progress:
                    progress(key, results[key])
    else:
        for key in points:
            m, n, s = key
            results[key] = _measure(cfg, m, n, s, seed, sweep.repetitions,
                                    trace_dir)
            if progress:
                progress(key, results[key])
    rows = []
    for n in sweep.consumers:
        mode = accelerated_mode(n)
        for size in sweep.sizes:
            base = results[("shared-memory", n, size)]
            t = results[(mode, n, size)]
            rows.append(Row("shared-memory", n, size, base, 0.0))
            rows.append(Row(mode, n, size, t, (base / t - 1.0) * 100.0))
    rows.sort(key=_row_key)
    return rows
