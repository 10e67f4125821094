"""Accelerator socket: channel engines, address translation, peer streams.

Each accelerator unit talks to its socket over four latency-insensitive
channels (read control/data, write control/data) that move one item per
cycle through a two-deep skid buffer. The socket turns read bursts into DMA
requests or pull requests, collects write bursts whole before emitting them
(store-and-forward), and runs at most one credit-managed serve engine per
tile for peer-to-peer distribution.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

from .errors import ProtocolError
from .noc import MsgType
from .simkernel import Component

PAGE_BYTES = 1 << 20
SERVE_SLOTS = 2          # collected bursts a serve engine may hold


@dataclass
class BurstDesc:
    """One channel command: a contiguous burst in unit-visible space."""

    index: int            # byte address on the unit's side
    nbytes: int
    user: int = 0         # 0 = memory, >0 = peer stream selector
    data: bytes = b""     # write bursts carry their payload snapshot

    def __post_init__(self):
        if self.nbytes <= 0 or self.nbytes % 8 or self.index % 8:
            raise ProtocolError(
                f"burst must be a positive whole number of words "
                f"(index={self.index:#x} nbytes={self.nbytes})")


class Tlb:
    """Region map from unit-virtual addresses to physical memory."""

    def __init__(self, regions=(), page_bytes=PAGE_BYTES):
        # regions: iterable of (vbase, pbase, nbytes)
        self.regions = tuple(sorted(regions))
        self.page_bytes = page_bytes

    def translate(self, index, nbytes):
        """Physical (addr, nbytes) segments, split at page boundaries."""
        segs = []
        need = nbytes
        at = index
        while need:
            for vbase, pbase, rlen in self.regions:
                if vbase <= at < vbase + rlen:
                    paddr = pbase + (at - vbase)
                    n = min(need, vbase + rlen - at)
                    break
            else:
                raise ProtocolError(f"no translation for address {at:#x}")
            # never let one request straddle a page
            n = min(n, self.page_bytes - paddr % self.page_bytes)
            segs.append((paddr, n))
            at += n
            need -= n
        return segs


class UnitPort:
    """The four channels wired between one unit and its socket."""

    __slots__ = ("rd_ctrl", "rd_data", "wr_ctrl", "wr_data")

    def __init__(self, kern, name, bank):
        self.rd_ctrl = kern.queue(f"{name}.rd_ctrl", depth=2, reader=bank)
        self.rd_data = kern.queue(f"{name}.rd_data", depth=2, writer=bank)
        self.wr_ctrl = kern.queue(f"{name}.wr_ctrl", depth=2, reader=bank)
        self.wr_data = kern.queue(f"{name}.wr_data", depth=2, reader=bank)


class _Seg:
    """One outstanding DMA read request of a burst."""

    __slots__ = ("serial", "paddr", "nbytes", "words", "arrived", "fed", "pkt")

    def __init__(self, serial, paddr, nbytes):
        self.serial = serial
        self.paddr = paddr
        self.nbytes = nbytes
        self.words = (nbytes + 7) // 8
        self.arrived = 0
        self.fed = 0
        self.pkt = None


class _RdBurst:
    __slots__ = ("user", "nbytes", "words", "segs", "cur", "fed", "src")

    def __init__(self, user, nbytes, segs=None, src=None):
        self.user = user
        self.nbytes = nbytes
        self.words = (nbytes + 7) // 8
        self.segs = segs          # DMA: list of _Seg, fed in order
        self.cur = 0
        self.fed = 0              # pull: words already forwarded
        self.src = src            # pull: peer tile


class _UnitCtx:
    """Socket-side state of one accelerator unit."""

    __slots__ = ("idx", "port", "tlb", "lut", "cmd_q", "done_q", "tx0",
                 "rd_bursts", "rd_open", "serial", "pull_streams",
                 "wr_cur", "wr_hold", "wacks", "job", "acc_done", "irq_sent")

    def __init__(self, idx, port, cmd_q, done_q):
        self.idx = idx
        self.port = port
        self.tlb = Tlb()
        self.lut = {}
        self.cmd_q = cmd_q
        self.done_q = done_q
        self.tx0 = deque()        # request packets awaiting emission
        self.rd_bursts = deque()
        self.rd_open = {}         # serial -> _Seg awaiting response data
        self.serial = 0
        self.pull_streams = {}    # src tile -> deque of [pkt, avail, fed]
        self.wr_cur = None        # [desc, words_left] burst being collected
        self.wr_hold = None       # collected burst waiting for a serve slot
        self.wacks = set()        # outstanding write ack keys
        self.job = None
        self.acc_done = False
        self.irq_sent = False


class _Serve:
    """Credit-managed multicast distributor; at most one per tile."""

    __slots__ = ("unit", "group", "members", "credits", "bursts", "closed")

    def __init__(self, unit, group):
        self.unit = unit
        self.group = group
        self.members = []         # (tile, unit) in first-request order
        self.credits = {}
        self.bursts = deque()     # [desc, sent_bytes]
        self.closed = False


class SocketBank(Component):
    """All socket engines of one tile plus the shared NIC glue."""

    def __init__(self, kern, mesh, tile, host_tile):
        self.name = f"bank({tile.x},{tile.y})"
        self.kern = kern
        self.mesh = mesh
        self.tile = tile
        self.host_tile = host_tile
        self.nic = mesh.nics[tile]
        self.rx = self.nic.bind_sink(self)
        self.mem_tile = None      # wired by the instance builder
        self.units = []
        self.pulls = {}           # src tile -> [unit idx, ...] subscriptions
        self.serve = None
        self.pending_pulls = []   # requests that arrived before the serve
        self.irq_out = deque()
        self._rr0 = 0

    def add_unit(self):
        idx = len(self.units)
        name = f"{self.name}.u{idx}"
        port = UnitPort(self.kern, name, self)
        cmd_q = self.kern.queue(f"{name}.cmd")
        done_q = self.kern.queue(f"{name}.done", reader=self)
        u = _UnitCtx(idx, port, cmd_q, done_q)
        self.units.append(u)
        return u

    # ------------------------------------------------------- event intake

    def evaluate(self, cyc):
        prog = False
        for dq in self.rx:
            if dq.q:
                for ev in dq.drain():
                    self._on_event(ev, cyc)
                prog = True
        for u in self.units:
            if u.done_q.q:
                u.done_q.take()
                u.acc_done = True
                prog = True
            if u.port.rd_ctrl.q:
                prog |= self._pump_reader(u, cyc)
            if u.rd_bursts:
                prog |= self._pump_feeder(u, cyc)
            if u.wr_hold is not None or u.wr_cur is not None or u.port.wr_ctrl.q:
                prog |= self._pump_writer(u, cyc)
        if self.serve is not None:
            prog |= self._pump_serve(cyc)
        prog |= self._pump_tx(cyc)
        self._check_done(cyc)
        if prog:
            self.kern.wake(self)

    def _on_event(self, ev, cyc):
        kind = ev[0]
        pkt = ev[1]
        if kind == "data":
            words = ev[2]
            if pkt.msg_type == MsgType.DMA_RESPONSE:
                uidx, serial = pkt.meta[1]
                seg = self.units[uidx].rd_open[serial]
                seg.pkt = pkt
                seg.arrived += words
            else:   # P2P_DATA fans out to every unit pulling from this peer
                for uidx in self.pulls.get(pkt.src, ()):
                    sq = self.units[uidx].pull_streams[pkt.src]
                    if sq and sq[-1][0] is pkt:
                        sq[-1][1] += words
                    else:
                        sq.append([pkt, words, 0])
            return
        mt = pkt.msg_type
        if mt == MsgType.P2P_REQUEST:
            _, req_unit, nbytes = pkt.meta
            self._pull_request((pkt.src, req_unit), nbytes)
        elif mt == MsgType.DMA_RESPONSE:
            if pkt.meta[0] == "wack":
                uidx, serial = pkt.meta[1]
                self.units[uidx].wacks.discard(serial)
        elif mt == MsgType.CONFIG:
            _, uidx, job = pkt.meta
            self._configure(self.units[uidx], job)
        elif mt == MsgType.P2P_DATA:
            pass    # per-flit data events already carried the payload
        else:
            raise ProtocolError(f"{self.name}: unexpected {mt.name} packet")

    def _configure(self, u, job):
        u.job = job
        u.tlb = Tlb(job.regions)
        u.lut = {user: dest for user, dest in job.lut}
        u.acc_done = False
        u.irq_sent = False
        if job.write_user > 0:
            self._open_serve(u.idx, job.write_user)
        u.cmd_q.stage_put(job)

    def _open_serve(self, uidx, group):
        if self.serve is not None and not self.serve.closed:
            raise ProtocolError(
                f"{self.name}: a second concurrent serve engine is unsupported")
        self.serve = _Serve(uidx, group)
        pending, self.pending_pulls = self.pending_pulls, []
        for requester, nbytes in pending:
            self._grant(requester, nbytes)

    def _pull_request(self, requester, nbytes):
        if self.serve is None:
            self.pending_pulls.append((requester, nbytes))
        else:
            self._grant(requester, nbytes)

    def _grant(self, requester, nbytes):
        sv = self.serve
        if sv.closed:
            raise ProtocolError(
                f"{self.name}: pull request from {requester} after the "
                f"stream finished")
        if requester in sv.credits:
            sv.credits[requester] += nbytes
        elif len(sv.members) < sv.group:
            sv.members.append(requester)
            sv.credits[requester] = nbytes
        else:
            raise ProtocolError(
                f"{self.name}: {requester} is a {len(sv.members) + 1}th pull "
                f"stream into a group of {sv.group}")

    # ------------------------------------------------------------ engines

    def _pump_reader(self, u, cyc):
        """Accept one read burst descriptor and queue its requests."""
        ch = u.port.rd_ctrl
        if not ch.q:
            return False
        if not ch.open(cyc):
            self.kern.wake(self)
            return False
        desc = ch.take()
        if desc.user == 0:
            segs = []
            for paddr, nbytes in u.tlb.translate(desc.index, desc.nbytes):
                seg = _Seg(u.serial, paddr, nbytes)
                u.serial += 1
                u.rd_open[seg.serial] = seg
                segs.append(seg)
                u.tx0.append(self.mesh.packet(
                    MsgType.DMA_READ_REQ, self.tile, (self.mem_tile,),
                    meta=("rd", paddr, nbytes, (u.idx, seg.serial))))
            u.rd_bursts.append(_RdBurst(0, desc.nbytes, segs=segs))
        else:
            try:
                src = u.lut[desc.user]
            except KeyError:
                raise ProtocolError(
                    f"{self.name}.u{u.idx}: no peer behind user={desc.user}"
                ) from None
            u.rd_bursts.append(_RdBurst(desc.user, desc.nbytes, src=src))
            subs = self.pulls.setdefault(src, [])
            if u.idx not in subs:
                subs.append(u.idx)
                u.pull_streams[src] = deque()
            u.tx0.append(self.mesh.packet(
                MsgType.P2P_REQUEST, self.tile, (src,),
                meta=("pull", u.idx, desc.nbytes)))
        return True

    def _pump_feeder(self, u, cyc):
        """Forward one arrived word to the unit's read data channel."""
        if not u.rd_bursts:
            return False
        ch = u.port.rd_data
        if ch.space() < 1:
            return False
        burst = u.rd_bursts[0]
        if burst.user == 0:
            seg = burst.segs[burst.cur]
            if seg.fed >= seg.arrived:
                return False
            ch.stage_put(seg.pkt)
            seg.fed += 1
            if seg.fed == seg.words:
                del u.rd_open[seg.serial]
                burst.cur += 1
                if burst.cur == len(burst.segs):
                    u.rd_bursts.popleft()
            return True
        sq = u.pull_streams[burst.src]
        if not sq:
            return False
        head = sq[0]
        if head[2] >= head[1]:
            return False
        ch.stage_put(head[0])
        head[2] += 1
        burst.fed += 1
        if head[2] * 8 >= len(head[0].data):
            sq.popleft()
        if burst.fed == burst.words:
            u.rd_bursts.popleft()
        return True

    def _pump_writer(self, u, cyc):
        """Collect write bursts word by word, then route them whole."""
        if u.wr_hold is not None:
            if not self._route_serve(u, u.wr_hold):
                return False
            u.wr_hold = None
            return True
        if u.wr_cur is None:
            ch = u.port.wr_ctrl
            if not ch.q:
                return False
            if not ch.open(cyc):
                self.kern.wake(self)
                return False
            desc = ch.take()
            u.wr_cur = [desc, (desc.nbytes + 7) // 8]
            return True
        ch = u.port.wr_data
        if not ch.q:
            return False
        if not ch.open(cyc):
            self.kern.wake(self)
            return False
        ch.take()
        u.wr_cur[1] -= 1
        if u.wr_cur[1] == 0:
            desc = u.wr_cur[0]
            u.wr_cur = None
            if desc.user == 0:
                at = 0
                for paddr, nbytes in u.tlb.translate(desc.index, desc.nbytes):
                    key = (u.idx, u.serial)
                    u.serial += 1
                    u.wacks.add(key[1])
                    u.tx0.append(self.mesh.packet(
                        MsgType.DMA_WRITE_REQ, self.tile, (self.mem_tile,),
                        data=desc.data[at:at + nbytes], meta=("wr", paddr, key)))
                    at += nbytes
            else:
                if not self._route_serve(u, desc):
                    u.wr_hold = desc
        return True

    def _route_serve(self, u, desc):
        sv = self.serve
        if sv is None or sv.unit != u.idx:
            raise ProtocolError(
                f"{self.name}.u{u.idx}: write burst with user={desc.user} "
                f"but no serve engine was configured")
        if desc.user != sv.group:
            raise ProtocolError(
                f"{self.name}: burst group {desc.user} != configured "
                f"group {sv.group}")
        if len(sv.bursts) >= SERVE_SLOTS:
            return False
        sv.bursts.append([desc, 0])
        return True

    def _pump_serve(self, cyc):
        """Emit one credit-covered peer data packet."""
        sv = self.serve
        if sv is None or not sv.bursts or len(sv.members) < sv.group:
            return False
        grant = min(sv.credits[m] for m in sv.members)
        if grant <= 0:
            return False
        desc, sent = sv.bursts[0]
        n = min(grant, desc.nbytes - sent)
        dests = tuple(dict.fromkeys(t for t, _ in sv.members))
        pkt = self.mesh.packet(MsgType.P2P_DATA, self.tile, dests,
                               data=desc.data[sent:sent + n],
                               meta=("p2p", self.tile))
        self.nic.send(pkt)
        for m in sv.members:
            sv.credits[m] -= n
        sv.bursts[0][1] += n
        if sv.bursts[0][1] == desc.nbytes:
            sv.bursts.popleft()
        return True

    def _pump_tx(self, cyc):
        prog = False
        n = len(self.units)
        for k in range(n):
            u = self.units[(self._rr0 + k) % n]
            if u.tx0:
                self.nic.send(u.tx0.popleft())
                self._rr0 = (u.idx + 1) % n
                prog = True
                break
        if self.irq_out:
            self.nic.send(self.irq_out.popleft())
            prog = True
        return prog

    def _check_done(self, cyc):
        sv = self.serve
        for u in self.units:
            if not u.acc_done or u.irq_sent:
                continue
            if (u.rd_bursts or u.tx0 or u.wr_cur or u.wr_hold or u.wacks):
                continue
            if sv is not None and sv.unit == u.idx and not sv.closed:
                if sv.bursts:
                    continue
                sv.closed = True
                leftover = {m: c for m, c in sv.credits.items() if c > 0}
                if leftover:
                    raise ProtocolError(
                        f"{self.name}: pull credit left unserved at end of "
                        f"stream: {sorted(leftover.items())}")
            u.irq_sent = True
            self.irq_out.append(self.mesh.packet(
                MsgType.IRQ, self.tile, (self.host_tile,),
                meta=("irq", self.tile, u.idx)))
            self.kern.wake(self)

    def snapshot(self):
        sv = self.serve
        serve = None
        if sv is not None:
            serve = (sv.unit, sv.group, tuple(sv.members),
                     tuple(sorted((repr(m), c) for m, c in sv.credits.items())),
                     tuple((len(d.data), s) for d, s in sv.bursts), sv.closed)
        units = tuple(
            (u.serial, len(u.rd_bursts), len(u.tx0),
             tuple(sorted(u.rd_open)), u.wr_cur[1] if u.wr_cur else -1,
             u.wr_hold is not None, tuple(sorted(u.wacks)),
             u.acc_done, u.irq_sent)
            for u in self.units)
        return (units, serve, tuple(self.pending_pulls), len(self.irq_out))
