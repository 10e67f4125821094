"""Memory tile: sparse backing store behind a latency/bandwidth port.

The port streams words at a configurable rate. Read k starts at
max(arrival_k + latency, end_of_stream_{k-1}) — access latency pipelines
behind the previous stream — and produces its first word the cycle it
starts. Writes are posted: they commit when the port dequeues them, cost a
single port cycle, and are acknowledged with an empty response.
"""

from __future__ import annotations

import hashlib
import heapq
import math
from dataclasses import dataclass
from fractions import Fraction

from .errors import ConfigError, ProtocolError
from .noc import MsgType
from .simkernel import Component

PAGE_BYTES = 1 << 20


class PagedStore:
    """Sparse byte-addressed storage; pages materialize on first write."""

    def __init__(self, page_bytes=PAGE_BYTES):
        self.page_bytes = page_bytes
        self.pages = {}

    def write(self, addr, data):
        pb = self.page_bytes
        off = 0
        while off < len(data):
            page, at = divmod(addr + off, pb)
            n = min(pb - at, len(data) - off)
            buf = self.pages.get(page)
            if buf is None:
                buf = self.pages[page] = bytearray(pb)
            buf[at:at + n] = data[off:off + n]
            off += n

    def read(self, addr, nbytes):
        pb = self.page_bytes
        out = bytearray(nbytes)
        off = 0
        while off < nbytes:
            page, at = divmod(addr + off, pb)
            n = min(pb - at, nbytes - off)
            buf = self.pages.get(page)
            if buf is not None:
                out[off:off + n] = buf[at:at + n]
            off += n
        return bytes(out)

    def digest(self):
        h = hashlib.sha256()
        for page in sorted(self.pages):
            h.update(page.to_bytes(8, "little"))
            h.update(self.pages[page])
        return h.hexdigest()


@dataclass
class MemConfig:
    latency: int = 60                    # cycles from arrival to first word out
    bandwidth: Fraction = Fraction(1)    # words per cycle once streaming
    max_in_service: int = 1              # concurrent streams at the port

    def __post_init__(self):
        if not isinstance(self.bandwidth, Fraction):
            self.bandwidth = Fraction(self.bandwidth)
        if self.bandwidth <= 0:
            raise ConfigError("memory bandwidth must be positive")
        if self.latency < 1:
            raise ConfigError("memory latency must be at least one cycle")
        if self.max_in_service != 1:
            raise ConfigError("only one in-service stream is supported")


class MemCtrl(Component):
    """Serves DMA requests arriving at the memory tile in arrival order."""

    def __init__(self, kern, mesh, tile, mcfg, store=None):
        self.name = f"mem({tile.x},{tile.y})"
        self.kern = kern
        self.mesh = mesh
        self.tile = tile
        self.cfg = mcfg
        self.store = store if store is not None else PagedStore()
        self.stats = mesh.stats
        self.nic = mesh.nics[tile]
        self.rx = self.nic.bind_sink(self)
        self.stream_end = 0      # cycle the in-flight stream schedule ends
        self._due = []           # (cycle, seq, op) waiting for the port
        self._seq = 0

    def evaluate(self, cyc):
        for dq in self.rx:
            if dq.q:
                for kind, *rest in dq.drain():
                    if kind == "pkt":
                        self._admit(rest[0], cyc)
        while self._due and self._due[0][0] <= cyc:
            _, _, op = heapq.heappop(self._due)
            self._serve(op, cyc)
        if self._due:
            self.kern.wake_at(self, self._due[0][0])

    def _admit(self, pkt, cyc):
        if pkt.msg_type == MsgType.DMA_READ_REQ:
            _, addr, nbytes, key = pkt.meta
            words = (nbytes + 7) // 8
            start = max(cyc + self.cfg.latency, self.stream_end)
            last = start + math.ceil((words - 1) / self.cfg.bandwidth)
            self.stream_end = last + 1
            self.stats.port_log.append((pkt.pid, cyc, start, start, last))
            self._at(start, ("rd", pkt, addr, nbytes, key, start))
        elif pkt.msg_type == MsgType.DMA_WRITE_REQ:
            _, addr, key = pkt.meta
            start = max(cyc, self.stream_end)
            self.stream_end = start + 1
            self.stats.port_log.append((pkt.pid, cyc, start, start, start))
            self._at(start, ("wr", pkt, addr, key))
        else:
            raise ProtocolError(
                f"memory tile cannot serve {pkt.msg_type.name} from {pkt.src}")

    def _at(self, cycle, op):
        self._seq += 1
        heapq.heappush(self._due, (cycle, self._seq, op))
        self.kern.wake_at(self, cycle)

    def _serve(self, op, cyc):
        if op[0] == "rd":
            _, req, addr, nbytes, key, start = op
            data = self.store.read(addr, nbytes)
            resp = self.mesh.packet(
                MsgType.DMA_RESPONSE, self.tile, (req.src,), data,
                meta=("rsp", key), ready=self._word_paced(start, nbytes))
            self.nic.send(resp)
        else:
            _, req, addr, key = op
            self.store.write(addr, req.data)
            ack = self.mesh.packet(MsgType.DMA_RESPONSE, self.tile,
                                   (req.src,), b"", meta=("wack", key))
            self.nic.send(ack)

    def _word_paced(self, start, nbytes):
        """Earliest-emit cycle per flit: a flit leaves with its last word."""
        words = (nbytes + 7) // 8
        wpf = self.mesh.cfg.flit_bytes // 8
        num, den = self.cfg.bandwidth.numerator, self.cfg.bandwidth.denominator
        ready = [start, start]
        for first in range(0, words, wpf):
            w = min(first + wpf, words)          # 1-indexed last word aboard
            ready.append(start + ((w - 1) * den + num - 1) // num)
        return ready

    def snapshot(self):
        return (self.stream_end, len(self._due), self.store.digest())
