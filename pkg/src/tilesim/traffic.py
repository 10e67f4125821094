"""Scripted packet sources and logging sinks for interconnect studies."""

from __future__ import annotations

from .noc import PLANE_OF, MsgType
from .simkernel import Component


class PacketSource(Component):
    """Stages packets into a tile NIC according to a (cycle, ...) schedule.

    schedule entries are (cycle, msg_type, dests, nbytes); entries fire in
    order, several per cycle if scheduled so.
    """

    def __init__(self, kern, mesh, tile, schedule, meta=None):
        self.name = f"src({tile.x},{tile.y})"
        self.kern = kern
        self.mesh = mesh
        self.tile = tile
        self.nic = mesh.nics[tile]
        self.plan = sorted(schedule, key=lambda e: e[0])
        self.meta = meta
        self.sent = []               # pids in emission order
        self._i = 0
        kern.add(self)
        if self.plan:
            kern.wake_at(self, self.plan[0][0])

    def evaluate(self, cyc):
        while self._i < len(self.plan) and self.plan[self._i][0] <= cyc:
            _, msg_type, dests, nbytes = self.plan[self._i]
            pkt = self.mesh.packet(msg_type, self.tile, dests,
                                   data=bytes(nbytes), meta=self.meta)
            self.nic.send(pkt)
            self.sent.append(pkt.pid)
            self._i += 1
        if self._i < len(self.plan):
            self.kern.wake_at(self, self.plan[self._i][0])

    def snapshot(self):
        return (self._i,)


class SaturatingSource(Component):
    """Keeps the NIC fed with back-to-back packets to one destination set."""

    def __init__(self, kern, mesh, tile, dests, nbytes, count,
                 msg_type=MsgType.P2P_DATA, start=0):
        self.name = f"sat({tile.x},{tile.y})"
        self.kern = kern
        self.mesh = mesh
        self.tile = tile
        self.nic = mesh.nics[tile]
        self.dests = tuple(dests)
        self.nbytes = nbytes
        self.left = count
        self.msg_type = msg_type
        self.sent = []
        kern.add(self)
        kern.wake_at(self, start)

    def evaluate(self, cyc):
        # keep a couple queued so the NIC never starves between packets
        plane = self.nic.tx[PLANE_OF[self.msg_type]]
        while self.left and len(plane.q) + len(plane._puts) < 2:
            pkt = self.mesh.packet(self.msg_type, self.tile, self.dests,
                                   data=bytes(self.nbytes))
            self.nic.send(pkt)
            self.sent.append(pkt.pid)
            self.left -= 1
        if self.left:
            self.kern.wake(self)

    def snapshot(self):
        return (self.left,)


class PacketSink(Component):
    """Consumes NIC delivery events and logs packet arrival cycles."""

    def __init__(self, kern, mesh, tile):
        self.name = f"sink({tile.x},{tile.y})"
        self.kern = kern
        self.tile = tile
        self.rx = mesh.nics[tile].bind_sink(self)
        self.log = []                # (cycle, pid, src)
        self.data_events = []        # (cycle, pid, words)
        kern.add(self)

    def evaluate(self, cyc):
        for dq in self.rx:
            if dq.q:
                for ev in dq.drain():
                    if ev[0] == "pkt":
                        pkt = ev[1]
                        self.log.append((cyc, pkt.pid, pkt.src))
                    else:
                        self.data_events.append((cyc, ev[1].pid, ev[2]))

    def arrivals_by_pid(self):
        return {pid: cyc for cyc, pid, _ in self.log}

    def snapshot(self):
        return (len(self.log), len(self.data_events))
