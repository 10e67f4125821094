"""Header codec: capacity points, bit layout round-trips, corruption."""

import random

import pytest

from tilesim.errors import CapacityError, CorruptHeaderError
from tilesim.noc import (Coord, MsgType, capacity, decode_header,
                         encode_header)


def test_capacity_points():
    # floor((64-24)/7) = 5, floor((128-24)/7) = 14, floor((256-24)/7) = 33
    # but the destination-count field caps multicast at 16.
    assert capacity(64) == 5
    assert capacity(128) == 14
    assert capacity(256) == 16


def test_capacity_cap_is_the_field_width():
    assert capacity(256, max_mcast=33) == 33
    assert capacity(256, max_mcast=1) == 1


def test_unicast_round_trip_64():
    word = encode_header(Coord(0, 0), (Coord(2, 1),),
                         MsgType.DMA_READ_REQ, 64)
    src, dests, mt = decode_header(word, 64)
    assert src == Coord(0, 0)
    assert dests == (Coord(2, 1),)
    assert mt == MsgType.DMA_READ_REQ


def test_six_destinations_do_not_fit_64():
    dests = tuple(Coord(x, 1) for x in range(6))
    with pytest.raises(CapacityError):
        encode_header(Coord(1, 0), dests, MsgType.P2P_DATA, 64)


def test_exhaustive_4x4_unicast_round_trip():
    # every (src, dest) pair of a 4x4 mesh survives encode/decode
    tiles = [Coord(x, y) for x in range(4) for y in range(4)]
    for src in tiles:
        for dst in tiles:
            word = encode_header(src, (dst,), MsgType.P2P_REQUEST, 64)
            assert decode_header(word, 64) == (src, (dst,),
                                               MsgType.P2P_REQUEST)


def test_all_zero_payload_is_corrupt():
    with pytest.raises(CorruptHeaderError):
        decode_header(0, 64)


def test_fixed_field_positions():
    # bit layout contract: preamble [1:0], source [8:2], type [13:9],
    # count-1 [17:14], reserved [23:18], destinations every 7 bits from 24
    word = encode_header(Coord(3, 2), (Coord(1, 1), Coord(15, 7)),
                         MsgType.IRQ, 256)
    assert word & 0b11 == 0b10
    assert (word >> 2) & 0x7F == (2 << 4) | 3
    assert (word >> 9) & 0x1F == int(MsgType.IRQ)
    assert (word >> 14) & 0xF == 1          # two destinations
    assert (word >> 18) & 0x3F == 0
    assert (word >> 24) & 0x7F == (1 << 4) | 1
    assert (word >> 31) & 0x7F == (7 << 4) | 15


def test_round_trip_fuzz():
    rng = random.Random(0xC0DEC)
    for _ in range(10_000):
        bits = rng.choice((64, 128, 256))
        cap = capacity(bits)
        src = Coord(rng.randrange(16), rng.randrange(8))
        seen = set()
        while len(seen) < rng.randint(1, cap):
            seen.add(Coord(rng.randrange(16), rng.randrange(8)))
        dests = tuple(seen)
        mt = rng.choice(list(MsgType))
        word = encode_header(src, dests, mt, bits)
        assert word >> bits == 0, "encoding wider than the flit"
        assert decode_header(word, bits) == (src, dests, mt)


def test_reserved_bits_flagged():
    word = encode_header(Coord(0, 0), (Coord(1, 0),), MsgType.CONFIG, 64)
    with pytest.raises(CorruptHeaderError):
        decode_header(word | (1 << 18), 64)


def test_stray_bits_past_last_destination_flagged():
    word = encode_header(Coord(0, 0), (Coord(1, 0),), MsgType.CONFIG, 128)
    with pytest.raises(CorruptHeaderError):
        decode_header(word | (1 << 40), 128)   # second dest slot, count says 1


def test_corruption_fuzz_never_passes_silently():
    # flipping any single bit of a valid header either still decodes (to
    # different fields) or raises the corrupt-header error -- never crashes
    rng = random.Random(0xBADB17)
    for _ in range(2_000):
        dests = (Coord(rng.randrange(4), rng.randrange(4)),)
        word = encode_header(Coord(1, 1), dests, MsgType.DMA_RESPONSE, 64)
        flipped = word ^ (1 << rng.randrange(64))
        try:
            got = decode_header(flipped, 64)
        except CorruptHeaderError:
            continue
        assert got != (Coord(1, 1), dests, MsgType.DMA_RESPONSE)
