"""Accelerator-side engines: local memory, tagged transfers, traffic source.

The transfer engine (Idma) owns a window of eight tags handed out from a
rotating free pool. A read tag completes once every word of the burst has
landed in the local memory; a write tag completes once the socket has
accepted every word off the write channel. The status engine (Cdma) only
polls: done/error answers release the tag back to the pool.
"""

from __future__ import annotations

import hashlib
from collections import deque
from dataclasses import dataclass
from enum import IntEnum

from .errors import BufferOverrunError, ProtocolError, TagsExhaustedError
from .simkernel import Component
from .socket import BurstDesc

TAG_WINDOW = 8


class TagStatus(IntEnum):
    BUSY = 0
    DONE = 1
    ERROR = 2


class Plm:
    """Private local memory of one accelerator unit."""

    def __init__(self, nbytes=8192):
        self.nbytes = nbytes
        self.buf = bytearray(nbytes)

    def read(self, off, n):
        if off < 0 or off + n > self.nbytes:
            raise BufferOverrunError(f"plm read [{off}:{off + n}) of {self.nbytes}")
        return bytes(self.buf[off:off + n])

    def write(self, off, data):
        if off < 0 or off + len(data) > self.nbytes:
            raise BufferOverrunError(
                f"plm write [{off}:{off + len(data)}) of {self.nbytes}")
        self.buf[off:off + len(data)] = data

    def digest(self):
        return hashlib.sha256(self.buf).hexdigest()


class _Xfer:
    __slots__ = ("tag", "status", "off", "words", "pos", "token_end")

    def __init__(self, tag, off, words):
        self.tag = tag
        self.status = TagStatus.BUSY
        self.off = off            # PLM byte offset
        self.words = words
        self.pos = 0              # words landed (reads)
        self.token_end = 0        # channel take count that retires a write


class Idma:
    """Tagged burst mover between the PLM and the socket channels."""

    def __init__(self, port, plm):
        self.port = port
        self.plm = plm
        self.free = deque(range(TAG_WINDOW))
        self.tags = {}
        self._rd_descs = deque()      # (desc, xfer) awaiting rd_ctrl space
        self._wr_descs = deque()      # (desc, xfer) awaiting wr_ctrl space
        self._wr_tokens = deque()     # [xfer, tokens_left, desc_seq]
        self._wr_await = deque()      # fully staged writes, in retire order
        self._wr_staged = 0           # write descriptors put on the channel
        self._wr_token_total = 0      # tokens ever staged on wr_data
        self._rd_track = deque()      # read xfers in channel order
        self._rd_pkt = None           # current source packet on rd_data
        self._rd_used = 0             # words consumed from that packet
        self._rd_run = 0              # uncopied words of the current run

    def _alloc(self):
        if not self.free:
            raise TagsExhaustedError(
                f"all {TAG_WINDOW} transfer tags are in flight")
        return self.free.popleft()

    def read(self, plm_off, index, nbytes, user=0):
        """Start a burst from memory/peer into the PLM; returns the tag."""
        tag = self._alloc()
        xfer = _Xfer(tag, plm_off, (nbytes + 7) // 8)
        self.tags[tag] = xfer
        if nbytes <= 0 or plm_off + nbytes > self.plm.nbytes:
            xfer.status = TagStatus.ERROR
            return tag
        self._rd_descs.append((BurstDesc(index, nbytes, user), xfer))
        self._rd_track.append(xfer)
        return tag

    def write(self, plm_off, index, nbytes, user=0):
        """Start a burst from the PLM out through the socket."""
        tag = self._alloc()
        xfer = _Xfer(tag, plm_off, (nbytes + 7) // 8)
        self.tags[tag] = xfer
        if nbytes <= 0 or plm_off + nbytes > self.plm.nbytes:
            xfer.status = TagStatus.ERROR
            return tag
        data = self.plm.read(plm_off, nbytes)
        desc = BurstDesc(index, nbytes, user, data)
        seq = len(self._wr_descs) + self._wr_staged
        self._wr_descs.append((desc, xfer))
        self._wr_tokens.append([xfer, xfer.words, seq])
        return tag

    def poll(self, tag):
        """Tri-state status; done/error answers hand the tag back."""
        xfer = self.tags.get(tag)
        if xfer is None:
            raise ProtocolError(f"poll of unallocated tag {tag}")
        if xfer.status != TagStatus.BUSY:
            del self.tags[tag]
            self.free.append(tag)
        return xfer.status

    def pump(self, cyc):
        """One cycle of channel work; returns whether anything moved."""
        port = self.port
        prog = False
        if self._rd_descs and port.rd_ctrl.space() >= 1:
            desc, _ = self._rd_descs.popleft()
            port.rd_ctrl.stage_put(desc)
            prog = True
        if self._wr_descs and port.wr_ctrl.space() >= 1:
            desc, _ = self._wr_descs.popleft()
            port.wr_ctrl.stage_put(desc)
            self._wr_staged += 1
            prog = True
        if self._wr_tokens and port.wr_data.space() >= 1:
            head = self._wr_tokens[0]
            if head[2] < self._wr_staged:      # its descriptor went out
                port.wr_data.stage_put(head[0].tag)
                self._wr_token_total += 1
                head[1] -= 1
                if head[1] == 0:
                    head[0].token_end = self._wr_token_total
                    self._wr_tokens.popleft()
                    self._wr_await.append(head[0])
                prog = True
        if port.rd_data.q:
            if port.rd_data.open(cyc):
                self._land(port.rd_data.take())
                prog = True
        # writes retire in token order, once the socket takes the last one
        aw = self._wr_await
        if aw:
            taken = port.wr_data.taken_total
            while aw and taken >= aw[0].token_end:
                aw.popleft().status = TagStatus.DONE
        return prog

    def _land(self, pkt):
        """Place one arrived word; bulk-copies flush on packet boundaries."""
        if pkt is not self._rd_pkt:
            self._flush()
            self._rd_pkt = pkt
            self._rd_used = 0
        head = self._rd_track[0]
        self._rd_used += 1
        self._rd_run += 1
        head.pos += 1
        if head.pos == head.words:
            self._flush()
            head.status = TagStatus.DONE
            self._rd_track.popleft()

    def _flush(self):
        run = self._rd_run
        if not run:
            return
        self._rd_run = 0
        head = self._rd_track[0]
        data = self._rd_pkt.data[8 * (self._rd_used - run):8 * self._rd_used]
        self.plm.write(head.off + 8 * (head.pos - run), data)

    def busy(self):
        return bool(self.tags or self._rd_descs or self._wr_descs
                    or self._wr_tokens)

    def snapshot(self):
        return (tuple(self.free),
                tuple(sorted((t, x.status, x.pos) for t, x in self.tags.items())),
                self._wr_staged, self._wr_token_total, self._rd_used)


class Cdma:
    """Status engine: read-only polling of transfer tags."""

    def __init__(self, idma):
        self._idma = idma

    def poll(self, tag):
        return self._idma.poll(tag)


@dataclass(frozen=True)
class Job:
    """One accelerator invocation descriptor."""

    src_index: int                 # unit-virtual read base
    dst_index: int                 # unit-virtual write base
    nbytes: int
    read_user: int = 0             # 0 pulls from memory, k pulls peer k
    write_user: int = 0            # 0 stores to memory, d serves d peers
    chunk: int = 4096
    compute: int = 0               # cycles of work per chunk before writeback
    regions: tuple = ()            # ((vbase, pbase, nbytes), ...) for the TLB
    lut: tuple = ()                # ((user, Coord), ...) peers for reads


class TrafficGen:
    """Streams a region through the PLM in double-buffered chunks.

    Chunk i lands in PLM buffer i % 2; the read for chunk i+1 overlaps the
    writeback of chunk i, and a buffer is reused only after its previous
    writeback retired.
    """

    def __init__(self, idma, cdma, plm):
        self.idma = idma
        self.cdma = cdma
        self.plm = plm
        self.job = None
        self.active = False

    def load(self, job, cyc):
        assert not self.active, "invocation while the previous one is running"
        assert len(self.idma.free) == TAG_WINDOW, "tags leaked across jobs"
        self.job = job
        self.sizes = []
        self.offs = [0]
        at = 0
        while at < job.nbytes:
            self.sizes.append(min(job.chunk, job.nbytes - at))
            at += self.sizes[-1]
            self.offs.append(at)
        if 2 * job.chunk > self.plm.nbytes:
            raise BufferOverrunError(
                f"two {job.chunk}-byte buffers exceed the {self.plm.nbytes}-byte "
                f"local memory")
        self.r_issued = self.r_done = 0
        self.w_issued = self.w_done = 0
        self.rd_tags = {}
        self.wr_tags = {}
        self.ready_at = {}
        self.active = True

    def _off(self, i):
        return self.offs[i]

    def step(self, cyc):
        """Advance the chunk pipeline; returns (progress, wake_cycle|None)."""
        j = self.job
        n = len(self.sizes)
        prog = False
        while self.w_done < self.w_issued:
            st = self.cdma.poll(self.wr_tags[self.w_done])
            if st == TagStatus.BUSY:
                break
            if st == TagStatus.ERROR:
                raise ProtocolError(f"write chunk {self.w_done} faulted")
            self.w_done += 1
            prog = True
        while self.r_done < self.r_issued:
            st = self.cdma.poll(self.rd_tags[self.r_done])
            if st == TagStatus.BUSY:
                break
            if st == TagStatus.ERROR:
                raise ProtocolError(f"read chunk {self.r_done} faulted")
            self.ready_at[self.r_done] = cyc + j.compute
            self.r_done += 1
            prog = True
        wake = None
        i = self.w_issued
        if i < self.r_done:
            due = self.ready_at[i]
            if due <= cyc:
                self.wr_tags[i] = self.idma.write(
                    (i % 2) * j.chunk, j.dst_index + self._off(i),
                    self.sizes[i], j.write_user)
                self.w_issued += 1
                prog = True
            else:
                wake = due
        r = self.r_issued
        if r < n and (r < 2 or self.w_done >= r - 1):
            self.rd_tags[r] = self.idma.read(
                (r % 2) * j.chunk, j.src_index + self._off(r),
                self.sizes[r], j.read_user)
            self.r_issued += 1
            prog = True
        if self.w_done == n:
            self.active = False
        return prog, wake

    def snapshot(self):
        if not self.active:
            return None
        return (self.r_issued, self.r_done, self.w_issued, self.w_done)


class AccUnit(Component):
    """One accelerator unit: local memory, transfer engines, traffic source."""

    def __init__(self, kern, name, unit_ctx, plm_bytes=8192):
        self.name = name
        self.kern = kern
        self.port = unit_ctx.port
        self.cmd_q = unit_ctx.cmd_q
        self.done_q = unit_ctx.done_q
        self.plm = Plm(plm_bytes)
        self.idma = Idma(self.port, self.plm)
        self.cdma = Cdma(self.idma)
        self.tg = TrafficGen(self.idma, self.cdma, self.plm)
        self._done_pending = False
        # channel wake wiring: we produce ctrl/write items, consume read data
        self.port.rd_ctrl.writer = self
        self.port.wr_ctrl.writer = self
        self.port.wr_data.writer = self
        self.port.rd_data.reader = self
        self.cmd_q.reader = self

    def evaluate(self, cyc):
        prog = False
        if self.cmd_q.q:
            job = self.cmd_q.take()
            self.tg.load(job, cyc)
            prog = True
        prog |= self.idma.pump(cyc)
        if self.tg.active:
            moved, wake = self.tg.step(cyc)
            prog |= moved
            if wake is not None:
                self.kern.wake_at(self, wake)
            if not self.tg.active:
                self._done_pending = True
        if self._done_pending and not self.idma.busy():
            self.done_q.stage_put(("done",))
            self._done_pending = False
            prog = True
        if self.port.rd_data.q and not self.port.rd_data.open(cyc):
            self.kern.wake(self)    # stalled by a test hook: keep polling
        if prog:
            self.kern.wake(self)

    def snapshot(self):
        return (self.idma.snapshot(), self.tg.snapshot(),
                self._done_pending, self.plm.digest())
