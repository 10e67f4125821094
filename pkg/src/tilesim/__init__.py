"""Cycle-level model of a tiled SoC: multicast mesh NoC, pull-based peer
transfers between accelerator sockets, and a producer/consumer experiment
harness comparing them against shared-memory staging."""

__version__ = "0.1.0"

from .errors import (BufferOverrunError, BusyError, CapacityError,
                     ConfigError, CorruptHeaderError, MaxCyclesError,
                     ProtocolError, SimulationError, TagsExhaustedError,
                     WatchdogError)
from .noc import (Coord, Direction, Mesh, MsgType, NocConfig, capacity,
                  decode_header, encode_header)
from .simkernel import Component, Kernel, RunStats, StagedQueue
from .memsys import MemConfig, MemCtrl, PagedStore
from .socket import BurstDesc, SocketBank, Tlb
from .accel import AccUnit, Cdma, Idma, Job, Plm, TagStatus, TrafficGen
from .experiment import (Row, SocConfig, SocInstance, SweepSpec,
                         load_config, preset_path, run_point, run_sweep)

__all__ = [n for n in dir() if not n.startswith("_")]
