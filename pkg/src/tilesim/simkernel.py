"""Two-phase cycle kernel: stage against committed state, then commit.

Blocks talk to each other only through StagedQueue objects. During a cycle
every component reads committed state and stages its effects; the kernel then
commits all touched queues at once. The outcome of a cycle therefore cannot
depend on the order components were evaluated in, which the test suite checks
by shuffling that order.
"""

from __future__ import annotations

import hashlib
import heapq
import random
from collections import deque
from dataclasses import dataclass, field

from .errors import BufferOverrunError, MaxCyclesError, WatchdogError

WATCHDOG_LIMIT = 10_000  # evaluated cycles without any progress
_BIG = 1 << 60


class Component:
    """A clocked block; evaluate() may only read committed state."""

    name = "component"

    def evaluate(self, cyc):
        raise NotImplementedError

    def snapshot(self):
        """Deterministic view of local state, folded into the run digest."""
        return ()

    def __repr__(self):
        return f"<{self.name}>"


class StagedQueue:
    """Bounded FIFO with staged puts and takes.

    Producers check space() against the snapshot from the end of the last
    cycle and the consumer takes committed entries; nothing becomes visible
    before commit. A full queue that drains this cycle accepts new items only
    next cycle, which is exactly credit-style backpressure with a one-cycle
    return path.
    """

    __slots__ = ("name", "depth", "q", "avail", "reader", "writer",
                 "taken_total", "stall_take", "_puts", "_take", "_kern",
                 "_touched")

    def __init__(self, kern, name, depth=None, reader=None, writer=None):
        self.name = name
        self.depth = depth          # None means unbounded
        self.q = deque()
        self.avail = _BIG if depth is None else depth
        self.reader = reader        # component woken when items commit
        self.writer = writer        # component woken when space frees
        self.taken_total = 0        # committed count of consumed items
        self.stall_take = None      # test hook: cyc -> bool, True blocks takes
        self._puts = []
        self._take = 0
        self._kern = kern
        self._touched = False
        kern._queues.append(self)

    def __len__(self):
        return len(self.q)

    def peek(self):
        return self.q[0] if self.q else None

    def space(self):
        """Entries a producer may still stage this cycle."""
        return self.avail - len(self._puts)

    def open(self, cyc):
        """Whether the consumer is allowed to take this cycle."""
        return self.stall_take is None or not self.stall_take(cyc)

    def stage_put(self, item):
        if self.depth is not None and self.avail - len(self._puts) <= 0:
            raise BufferOverrunError(f"{self.name}: put past depth {self.depth}")
        self._puts.append(item)
        if not self._touched:
            self._touched = True
            self._kern._touched.append(self)

    def take(self):
        """Consume the committed head; at most one take per cycle."""
        assert self.q, f"{self.name}: take from empty queue"
        assert self._take == 0, f"{self.name}: double take in one cycle"
        self._take = 1
        if not self._touched:
            self._touched = True
            self._kern._touched.append(self)
        return self.q[0]

    def drain(self):
        """Consume every committed entry (for event queues, not links)."""
        assert self._take == 0, f"{self.name}: drain after take"
        items = list(self.q)
        if items:
            self._take = len(items)
            if not self._touched:
                self._touched = True
                self._kern._touched.append(self)
        return items

    def _commit(self):
        self._touched = False
        kern = self._kern
        t = self._take
        if t:
            if t == 1:
                self.q.popleft()
            else:
                for _ in range(t):
                    self.q.popleft()
            self.taken_total += t
            self._take = 0
            if self.writer is not None:
                kern.wake(self.writer)
            kern._progress = True
        if self._puts:
            self.q.extend(self._puts)
            self._puts.clear()
            if self.reader is not None:
                kern.wake(self.reader)
            kern._progress = True
        if self.depth is not None:
            self.avail = self.depth - len(self.q)

    def snap(self):
        return (self.name, tuple(map(repr, self.q)), self.taken_total)


@dataclass
class RunStats:
    """Counters shared by every block of one simulation instance."""

    flit_moves: int = 0
    packets_sent: int = 0
    packets_delivered: int = 0
    detail: bool = False        # when True, per-event logs below are kept
    link_flits: dict = field(default_factory=dict)   # (x, y, port, plane) -> n
    injections: dict = field(default_factory=dict)   # pid -> cycle at source router
    deliveries: list = field(default_factory=list)   # (cycle, x, y, pid, seq, kind)
    port_log: list = field(default_factory=list)     # (pid, arrival, start, first, last)


class Kernel:
    """Runs components cycle by cycle with an event heap and an active set."""

    def __init__(self, shuffle_seed=None):
        self.cycle = -1
        self.components = []
        self._queues = []
        self._next = {}      # components to evaluate next cycle (ordered set)
        self._heap = []      # (cycle, seq, component) future wakeups
        self._hseq = 0
        self._touched = []
        self._progress = False
        self._starved = 0
        # Shuffling the evaluation order must not change any outcome; the
        # determinism tests run with a seed here and compare digests.
        self._rng = random.Random(shuffle_seed) if shuffle_seed is not None else None

    def add(self, comp):
        self.components.append(comp)
        return comp

    def queue(self, name, depth=None, reader=None, writer=None):
        return StagedQueue(self, name, depth=depth, reader=reader, writer=writer)

    def wake(self, comp):
        self._next[comp] = None

    def wake_at(self, comp, cyc):
        if cyc <= self.cycle:
            self._next[comp] = None
        else:
            self._hseq += 1
            heapq.heappush(self._heap, (cyc, self._hseq, comp))

    def note_progress(self):
        self._progress = True

    def run(self, max_cycles=10**12):
        """Advance until every component is idle; returns the last cycle."""
        if self._touched:
            # writes staged between runs become visible before the first cycle
            touched, self._touched = self._touched, []
            for q in touched:
                q._commit()
        while self._next or self._heap:
            if self._next:
                self.cycle += 1
            else:
                self.cycle = self._heap[0][0]   # nothing active: jump ahead
            while self._heap and self._heap[0][0] <= self.cycle:
                _, _, comp = heapq.heappop(self._heap)
                self._next[comp] = None
            if self.cycle > max_cycles:
                raise MaxCyclesError(f"still running after {max_cycles} cycles")
            batch = self._next
            self._next = {}
            if self._rng is not None:
                batch = list(batch)
                self._rng.shuffle(batch)
            self._progress = False
            cyc = self.cycle
            for comp in batch:
                comp.evaluate(cyc)
            if self._touched:
                touched, self._touched = self._touched, []
                for q in touched:
                    q._commit()
            if self._progress:
                self._starved = 0
            else:
                self._starved += 1
                if self._starved >= WATCHDOG_LIMIT:
                    raise WatchdogError(self.diagnose())
        return self.cycle

    def state_digest(self):
        """sha256 over all queue contents and component snapshots."""
        h = hashlib.sha256()
        for q in sorted(self._queues, key=lambda q: q.name):
            h.update(repr(q.snap()).encode())
        for c in sorted(self.components, key=lambda c: c.name):
            h.update(repr((c.name, c.snapshot())).encode())
        return h.hexdigest()

    def diagnose(self):
        """Human-readable picture of what is stuck, for watchdog reports."""
        lines = [f"no progress by cycle {self.cycle}"]
        for q in self._queues:
            if q.q:
                lines.append(f"  queue {q.name}: {len(q.q)} waiting, head={q.peek()!r}")
        pending = [c.name for _, _, c in self._heap]
        if pending:
            lines.append(f"  timers armed for: {', '.join(sorted(pending))}")
        return "\n".join(lines)
