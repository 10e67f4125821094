"""Mesh interconnect: header codec, dimension-order routing, wormhole routers.

Three independent switch planes carry requests, responses, and housekeeping
traffic so a request worm can never sit in front of the response that would
unblock it. Headers carry the route decision for the router currently holding
them; each hop rewrites the routes its branches will need next.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import NamedTuple

from .errors import CapacityError, ConfigError, CorruptHeaderError
from .simkernel import Component, RunStats, StagedQueue


class Coord(NamedTuple):
    x: int
    y: int

    def __repr__(self):
        return f"({self.x},{self.y})"


class Direction(IntEnum):
    LOCAL = 0
    NORTH = 1   # toward smaller y
    SOUTH = 2   # toward larger y
    EAST = 3    # toward larger x
    WEST = 4    # toward smaller x


OPPOSITE = {
    Direction.NORTH: Direction.SOUTH,
    Direction.SOUTH: Direction.NORTH,
    Direction.EAST: Direction.WEST,
    Direction.WEST: Direction.EAST,
}


class MsgType(IntEnum):
    DMA_READ_REQ = 0
    DMA_WRITE_REQ = 1
    DMA_RESPONSE = 2
    P2P_REQUEST = 3
    P2P_DATA = 4
    IRQ = 5
    CONFIG = 6


# Plane carrying each message class: requests and outbound stores ride plane 0,
# response/peer data plane 1, interrupts and configuration plane 2.
PLANE_OF = {
    MsgType.DMA_READ_REQ: 0,
    MsgType.DMA_WRITE_REQ: 0,
    MsgType.P2P_REQUEST: 0,
    MsgType.DMA_RESPONSE: 1,
    MsgType.P2P_DATA: 1,
    MsgType.IRQ: 2,
    MsgType.CONFIG: 2,
}
NUM_PLANES = 3
PLANE_NAMES = ("dma-request", "dma-response", "misc")

# Header geometry, bit 0 = LSB of the flit payload.
PREAMBLE = 0b10
HDR_FIXED_BITS = 24        # preamble + source + type + count + reserved
DEST_BITS = 7              # one packed (y << 4 | x) coordinate
X_BITS, Y_BITS = 4, 3
MAX_X, MAX_Y = 1 << X_BITS, 1 << Y_BITS


def capacity(flit_bits, max_mcast=16):
    """Destinations one header flit can carry at the given link width."""
    room = (flit_bits - HDR_FIXED_BITS) // DEST_BITS
    if room < 1:
        raise ConfigError(f"a {flit_bits}-bit flit cannot hold a header")
    return min(max_mcast, room)


def _pack_coord(c):
    return (c.y << X_BITS) | c.x


def _unpack_coord(v):
    return Coord(v & (MAX_X - 1), v >> X_BITS)


def encode_header(src, dests, msg_type, flit_bits, max_mcast=16):
    """Pack a header payload; raises CapacityError when dests don't fit."""
    n = len(dests)
    if not 1 <= n <= capacity(flit_bits, max_mcast):
        raise CapacityError(
            f"{n} destinations do not fit a {flit_bits}-bit header")
    word = PREAMBLE
    word |= _pack_coord(src) << 2
    word |= int(msg_type) << 9
    word |= (n - 1) << 14
    for i, d in enumerate(dests):
        word |= _pack_coord(d) << (HDR_FIXED_BITS + DEST_BITS * i)
    return word


def decode_header(word, flit_bits, max_mcast=16):
    """Unpack and validate a header payload.

    Returns (src, dests, msg_type); raises CorruptHeaderError on any
    malformed field, including stray bits in reserved or unused space.
    """
    if word >> flit_bits:
        raise CorruptHeaderError("payload wider than the flit")
    if word & 0b11 != PREAMBLE:
        raise CorruptHeaderError(f"bad preamble in {word:#x}")
    src = _unpack_coord((word >> 2) & 0x7F)
    raw_type = (word >> 9) & 0x1F
    try:
        msg_type = MsgType(raw_type)
    except ValueError:
        raise CorruptHeaderError(f"unknown message type {raw_type}") from None
    n = ((word >> 14) & 0xF) + 1
    if n > capacity(flit_bits, max_mcast):
        raise CorruptHeaderError(f"{n} destinations exceed header capacity")
    if (word >> 18) & 0x3F:
        raise CorruptHeaderError("reserved bits set")
    dests = tuple(
        _unpack_coord((word >> (HDR_FIXED_BITS + DEST_BITS * i)) & 0x7F)
        for i in range(n))
    if word >> (HDR_FIXED_BITS + DEST_BITS * n):
        raise CorruptHeaderError("stray bits past the last destination")
    return src, dests, msg_type


def dor_next_hop(cur, dest):
    """X-first dimension-order routing step from cur toward dest."""
    if dest.x > cur.x:
        return Direction.EAST
    if dest.x < cur.x:
        return Direction.WEST
    if dest.y > cur.y:
        return Direction.SOUTH
    if dest.y < cur.y:
        return Direction.NORTH
    return Direction.LOCAL


def neighbor(c, d):
    if d == Direction.EAST:
        return Coord(c.x + 1, c.y)
    if d == Direction.WEST:
        return Coord(c.x - 1, c.y)
    if d == Direction.SOUTH:
        return Coord(c.x, c.y + 1)
    if d == Direction.NORTH:
        return Coord(c.x, c.y - 1)
    return c


def lookahead_routes(at, dests):
    """Port each destination takes at router `at` (precomputed one hop ahead)."""
    return tuple(dor_next_hop(at, d) for d in dests)


def fork_set(cur, dests, routes):
    """Group destinations by output port, rewriting routes for each branch.

    Returns {port: (dests, routes_at_next_router)}; the LOCAL branch carries
    no routes since it leaves the mesh here.
    """
    groups = {}
    for d, r in zip(dests, routes):
        groups.setdefault(r, []).append(d)
    out = {}
    for port, ds in groups.items():
        ds = tuple(ds)
        if port == Direction.LOCAL:
            out[port] = (ds, ())
        else:
            nxt = neighbor(cur, port)
            out[port] = (ds, tuple(dor_next_hop(nxt, d) for d in ds))
    return out


@dataclass
class NocConfig:
    cols: int = 3               # mesh width, x in [0, cols)
    rows: int = 4               # mesh height, y in [0, rows)
    flit_bits: int = 256        # link width; data flits carry flit_bits/8 bytes
    fifo_depth: int = 4         # router input queue depth, in flits
    max_mcast: int = 16         # cap on destinations per header
    planes: object = NUM_PLANES  # plane count, or ordered plane identifiers

    def __post_init__(self):
        # planes given as identifiers are kept by name; extra planes beyond
        # the three traffic classes are built but never carry a message
        if isinstance(self.planes, int):
            self.plane_names = PLANE_NAMES[:self.planes] + tuple(
                f"plane{i}" for i in range(NUM_PLANES, self.planes))
        else:
            names = tuple(str(n) for n in self.planes)
            if len(set(names)) != len(names):
                raise ConfigError(f"plane identifiers repeat: {names}")
            self.plane_names = names
            self.planes = len(names)
        if not (1 <= self.cols <= MAX_X and 1 <= self.rows <= MAX_Y):
            raise ConfigError(
                f"mesh {self.cols}x{self.rows} outside the {MAX_X}x{MAX_Y} "
                f"addressable grid")
        if self.flit_bits not in (64, 128, 256):
            raise ConfigError(
                f"unsupported flit width {self.flit_bits}: pick 64, 128 or 256")
        if self.planes < NUM_PLANES:
            raise ConfigError(f"need at least {NUM_PLANES} planes")
        if self.fifo_depth < 1:
            raise ConfigError("router queues need at least one slot")
        capacity(self.flit_bits, self.max_mcast)   # must hold a header at all

    @property
    def flit_bytes(self):
        return self.flit_bits // 8

    def capacity(self):
        return capacity(self.flit_bits, self.max_mcast)


# Flit kind flags; a two-flit packet's second flit is plain F_TAIL.
F_HEAD, F_TAIL = 1, 2


class PacketRec:
    """One message: routing metadata plus the full payload bytes.

    Body flits reference the packet instead of carrying byte slices; the
    wire image of any flit can still be reproduced via payload_bits().
    Every packet spends one flit on the header and one on a metadata word
    (address/tag/length), so nflits = 2 + ceil(len(data) / flit_bytes).
    """

    __slots__ = ("pid", "msg_type", "src", "dests", "data", "meta", "nflits",
                 "ready")

    def __init__(self, pid, msg_type, src, dests, data=b"", meta=None,
                 flit_bytes=32, ready=None):
        self.pid = pid
        self.msg_type = msg_type
        self.src = src
        self.dests = tuple(dests)
        self.data = data
        self.meta = meta
        self.nflits = 2 + (len(data) + flit_bytes - 1) // flit_bytes
        self.ready = ready      # optional per-flit earliest-emit cycles

    @property
    def plane(self):
        return PLANE_OF[self.msg_type]

    def __repr__(self):
        return (f"pkt{self.pid}[{self.msg_type.name} {self.src}->"
                f"{','.join(map(repr, self.dests))} {len(self.data)}B]")


class Flit:
    """One link-level transfer unit."""

    __slots__ = ("kind", "pkt", "seq", "dests", "routes")

    def __init__(self, kind, pkt, seq, dests=None, routes=None):
        self.kind = kind
        self.pkt = pkt
        self.seq = seq
        self.dests = dests      # header only: tiles this copy still serves
        self.routes = routes    # header only: port each dest takes *here*

    @property
    def is_head(self):
        return bool(self.kind & F_HEAD)

    @property
    def is_tail(self):
        return bool(self.kind & F_TAIL)

    def payload_bits(self, flit_bits, max_mcast=16):
        """Wire image of this flit at the given link width."""
        if self.kind & F_HEAD:
            return encode_header(self.pkt.src, self.dests, self.pkt.msg_type,
                                 flit_bits, max_mcast)
        fb = flit_bits // 8
        if self.seq == 1:
            return hash(self.pkt.meta) & ((1 << flit_bits) - 1)
        chunk = self.pkt.data[(self.seq - 2) * fb:(self.seq - 1) * fb]
        return int.from_bytes(chunk, "little")

    def __repr__(self):
        tag = {0: "b", F_HEAD: "h", F_TAIL: "t", F_HEAD | F_TAIL: "ht"}[self.kind]
        return f"{tag}{self.pkt.pid}.{self.seq}"


def make_flit(pkt, seq, dests=None, routes=None):
    kind = (F_HEAD if seq == 0 else 0) | (F_TAIL if seq == pkt.nflits - 1 else 0)
    return Flit(kind, pkt, seq, dests, routes)


class RouterPlane:
    """One wormhole switch plane of a router.

    A header claims every output port its fork needs in the same cycle or
    none of them; body flits then follow the established route and the tail
    releases it. Output ports arbitrate round-robin over inputs, advancing
    only when a grant is consumed.
    """

    __slots__ = ("router", "node", "plane", "in_q", "out", "route", "owner",
                 "rr", "streak", "stats", "_keys")

    def __init__(self, router, kern, node, plane, depth, stats):
        self.router = router
        self.node = node
        self.plane = plane
        self.in_q = [
            StagedQueue(kern, f"rt({node.x},{node.y}).p{plane}.in{int(d)}",
                        depth=depth, reader=router)
            for d in Direction]
        self.out = [None] * 5       # downstream queues, wired by the mesh
        self.route = [None] * 5     # established fork per input, or None
        self.owner = [-1] * 5       # input that holds each output port
        self.rr = [0] * 5           # round-robin scan start per output
        self.streak = 0             # cycles headers lost arbitration outright
        self.stats = stats
        self._keys = [(node.x, node.y, int(d), plane) for d in Direction]

    def evaluate(self, cyc):
        moved = worked = False
        heads = None
        in_q = self.in_q
        out = self.out
        routes = self.route
        for i in range(5):
            q = in_q[i]
            if not q.q:
                continue
            route = routes[i]
            if route is None:
                if heads is None:
                    heads = []
                heads.append(i)
                continue
            # continuing worm: it owns its ports, only space can stop it
            for d in route:
                if out[d].space() < 1:
                    break
            else:
                f = q.take()
                for d in route:
                    self._send(d, f, cyc)
                if f.kind & F_TAIL:
                    for d in route:
                        self.owner[d] = -1
                    routes[i] = None
                moved = True
        if heads:
            worked = self._admit(heads, cyc)
        if moved or worked:
            self.router.kern.wake(self.router)
        return moved or worked

    def _admit(self, heads, cyc):
        """All-or-nothing port claim for the headers at the given inputs."""
        forks = {}
        for i in heads:
            f = self.in_q[i].q[0]
            assert f.is_head, f"worm body arrived without a header: {f!r}"
            forks[i] = fork_set(self.node, f.dests, f.routes)
        if self.streak >= 2:
            # Two multi-port forks can block each other through opposing
            # round-robin picks; after two fruitless cycles fall back to
            # strict input order so one of them always gets through.
            grant = self._claim_in_order(heads, forks)
        else:
            winner = {}
            for i in heads:
                for d in forks[i]:
                    if d not in winner and self.owner[d] == -1:
                        lst = [j for j in heads if d in forks[j]]
                        winner[d] = min(lst, key=lambda j: (j - self.rr[d]) % 5)
            grant = [i for i in heads
                     if all(self.owner[d] == -1 and winner.get(d) == i
                            and self.out[d].space() >= 1 for d in forks[i])]
        progressed = False
        for i in grant:
            f = self.in_q[i].take()
            fork = forks[i]
            tail = bool(f.kind & F_TAIL)
            for d, (ds, rts) in fork.items():
                branch = Flit(f.kind, f.pkt, f.seq, ds, rts)
                self._send(d, branch, cyc)
                if not tail:
                    self.owner[d] = i
                self.rr[d] = (i + 1) % 5
            if not tail:
                self.route[i] = tuple(fork)
            progressed = True
        if progressed:
            self.streak = 0
        else:
            # blocked purely by arbitration (ports free and roomy, just lost)?
            lost = any(
                all(self.owner[d] == -1 and self.out[d].space() >= 1
                    for d in forks[i])
                for i in heads if i not in grant)
            self.streak = self.streak + 1 if lost else 0
        # a waiting header must retry even if no queue event wakes us
        if any(i not in grant for i in heads):
            self.router.kern.wake(self.router)
        return progressed

    def _claim_in_order(self, heads, forks):
        grant, taken = [], set()
        for i in sorted(heads):
            ports = forks[i]
            if all(self.owner[d] == -1 and d not in taken
                   and self.out[d].space() >= 1 for d in ports):
                grant.append(i)
                taken.update(ports)
        return grant

    def _send(self, d, flit, cyc):
        out = self.out[d]
        assert out is not None, f"route off the mesh at {self.node} port {d}"
        out.stage_put(flit)
        st = self.stats
        st.flit_moves += 1
        if st.detail:
            key = self._keys[d]
            st.link_flits[key] = st.link_flits.get(key, 0) + 1
            if d == Direction.LOCAL:
                st.deliveries.append((cyc, self.node.x, self.node.y,
                                      flit.pkt.pid, flit.seq, flit.kind))

    def snapshot(self):
        return (tuple(map(repr, self.route)), tuple(self.owner),
                tuple(self.rr), self.streak)


class Router(Component):
    """One tile's router: an independent wormhole switch per plane."""

    def __init__(self, kern, cfg, tile, stats):
        self.name = f"router({tile.x},{tile.y})"
        self.kern = kern
        self.tile = tile
        self.planes = [RouterPlane(self, kern, tile, p, cfg.fifo_depth, stats)
                       for p in range(cfg.planes)]

    def evaluate(self, cyc):
        for pl in self.planes:
            qs = pl.in_q
            # skip planes with no flits at all this cycle
            if qs[0].q or qs[1].q or qs[2].q or qs[3].q or qs[4].q:
                pl.evaluate(cyc)

    def snapshot(self):
        return tuple(pl.snapshot() for pl in self.planes)


_CUT_THROUGH = frozenset((MsgType.DMA_RESPONSE, MsgType.P2P_DATA))


class TileNic(Component):
    """Network interface: serializes sends into flits, reassembles arrivals.

    Inbound packets are announced to the bound sink as ("data", pkt, words)
    events per data flit for streaming consumers, then ("pkt", pkt) once the
    tail lands.
    """

    def __init__(self, kern, cfg, tile, stats):
        self.name = f"nic({tile.x},{tile.y})"
        self.kern = kern
        self.cfg = cfg
        self.tile = tile
        self.stats = stats
        self.tx = [kern.queue(f"{self.name}.tx{p}", reader=self)
                   for p in range(cfg.planes)]
        self.inbox = [kern.queue(f"{self.name}.rx{p}", reader=self)
                      for p in range(cfg.planes)]
        self.deliver = None          # sink event queues, one per plane
        self.local_in = None         # router local input queues, set by Mesh
        self._emit = [None] * cfg.planes     # [pkt, next_seq] per plane
        self._expect = [0] * cfg.planes      # flits still owed to the current worm
        self._wpf = cfg.flit_bytes // 8      # payload words per data flit

    def bind_sink(self, comp):
        self.deliver = [self.kern.queue(f"{self.name}.ev{p}", reader=comp)
                        for p in range(self.cfg.planes)]
        return self.deliver

    def send(self, pkt):
        """Queue a packet for emission (called by the tile's one sender)."""
        for d in pkt.dests:
            if not (0 <= d.x < self.cfg.cols and 0 <= d.y < self.cfg.rows):
                raise ConfigError(f"destination {d} outside the mesh")
        if len(pkt.dests) > self.cfg.capacity():
            raise CapacityError(
                f"{len(pkt.dests)} destinations exceed header capacity "
                f"{self.cfg.capacity()}")
        self.stats.packets_sent += 1
        self.tx[pkt.plane].stage_put(pkt)

    def evaluate(self, cyc):
        again = False
        for p in range(self.cfg.planes):
            box = self.inbox[p]
            if box.q:
                self._absorb(p, box.take(), cyc)
                again = True
            if self._emit[p] is not None or self.tx[p].q:
                again |= self._pump_tx(p, cyc)
        if again:
            self.kern.wake(self)

    def _absorb(self, p, f, cyc):
        pkt = f.pkt
        if f.is_head:
            assert self._expect[p] == 0, "worms interleaved within one plane"
            self._expect[p] = pkt.nflits
        self._expect[p] -= 1
        dq = self.deliver[p] if self.deliver is not None else None
        if dq is None:
            return
        if f.seq >= 2 and pkt.msg_type in _CUT_THROUGH:
            wpf = self._wpf
            total = (len(pkt.data) + 7) // 8
            words = min(wpf, total - (f.seq - 2) * wpf)
            dq.stage_put(("data", pkt, words))
        if f.is_tail:
            self.stats.packets_delivered += 1
            dq.stage_put(("pkt", pkt))

    def _pump_tx(self, p, cyc):
        em = self._emit[p]
        if em is None:
            txq = self.tx[p]
            if not txq.q:
                return False
            em = self._emit[p] = [txq.take(), 0]
        pkt, seq = em
        if pkt.ready is not None:
            due = pkt.ready[seq]
            if due > cyc:
                self.kern.wake_at(self, due)
                return False
        lq = self.local_in[p]
        if lq.space() < 1:
            return False            # space frees -> the queue wakes us
        if seq == 0:
            flit = Flit(F_HEAD | (F_TAIL if pkt.nflits == 1 else 0), pkt, 0,
                        pkt.dests, lookahead_routes(self.tile, pkt.dests))
            if self.stats.detail:
                self.stats.injections[pkt.pid] = cyc
        else:
            flit = make_flit(pkt, seq)
        lq.stage_put(flit)
        em[1] += 1
        if em[1] >= pkt.nflits:
            self._emit[p] = None
        return True

    def snapshot(self):
        return (tuple((repr(e[0]), e[1]) if e else None for e in self._emit),
                tuple(self._expect))


class Mesh:
    """Routers plus per-tile network interfaces, wired as a 2D grid."""

    def __init__(self, kern, cfg, stats=None):
        self.kern = kern
        self.cfg = cfg
        self.stats = stats if stats is not None else RunStats()
        self.routers = {}
        self.nics = {}
        self._pid = 0
        for y in range(cfg.rows):
            for x in range(cfg.cols):
                t = Coord(x, y)
                self.routers[t] = kern.add(Router(kern, cfg, t, self.stats))
                self.nics[t] = kern.add(TileNic(kern, cfg, t, self.stats))
        sides = (Direction.NORTH, Direction.SOUTH, Direction.EAST,
                 Direction.WEST)
        for t, r in self.routers.items():
            nic = self.nics[t]
            nic.local_in = [r.planes[p].in_q[Direction.LOCAL]
                            for p in range(cfg.planes)]
            for p in range(cfg.planes):
                rp = r.planes[p]
                rp.out[Direction.LOCAL] = nic.inbox[p]
                rp.in_q[Direction.LOCAL].writer = nic
                for d in sides:
                    nt = neighbor(t, d)
                    if nt in self.routers:
                        nrp = self.routers[nt].planes[p]
                        rp.out[d] = nrp.in_q[OPPOSITE[d]]
                        nrp.in_q[OPPOSITE[d]].writer = r

    def packet(self, msg_type, src, dests, data=b"", meta=None, ready=None):
        """Build a packet with an instance-local id (keeps runs replayable)."""
        pid = self._pid
        self._pid += 1
        return PacketRec(pid, msg_type, src, dests, data, meta,
                         flit_bytes=self.cfg.flit_bytes, ready=ready)

    def hops(self, a, b):
        return abs(a.x - b.x) + abs(a.y - b.y)
