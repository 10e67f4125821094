"""Exception types shared across the simulator."""


class SimulationError(Exception):
    """Base class for everything the simulator raises on purpose."""


class ConfigError(SimulationError):
    """Bad or inconsistent configuration values."""


class CapacityError(ConfigError):
    """More multicast destinations than one header flit can carry."""


class CorruptHeaderError(SimulationError):
    """A header flit failed validation on decode."""


class BufferOverrunError(SimulationError):
    """A bounded queue or local memory was pushed past its size."""


class ProtocolError(SimulationError):
    """A transfer-protocol invariant was violated (credits, ordering, ...)."""


class TagsExhaustedError(SimulationError):
    """No free transfer tags left in the window."""


class BusyError(SimulationError):
    """Operation issued to an engine that cannot accept it right now."""


class WatchdogError(SimulationError):
    """The simulation stopped making progress before the workload finished."""


class MaxCyclesError(SimulationError):
    """Cycle budget exhausted before the workload finished."""
