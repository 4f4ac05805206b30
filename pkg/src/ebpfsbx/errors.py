"""Shared exception hierarchy.

Two families matter at runtime: plain errors (bad input, bad config, misuse
of an API) which propagate as exceptions, and guest faults, which the engine
catches and records in the run result instead of letting them escape.
"""


class Error(Exception):
    """Base class for every error raised by this package."""


class ConfigError(Error):
    """Invalid scenario configuration or CLI usage."""


class ArenaExhausted(Error):
    """The simulated address space has no room left for an allocation."""


class GuestFault(Error):
    """A fault attributable to guest execution.

    The engine converts these into a fault record on the run result rather
    than propagating them. `kind` is the stable fault name used in reports.
    """

    kind = "GuestFault"

    def __init__(self, msg="", *, addr=None, pc=None, ptr_tag=None, mem_tag=None):
        super().__init__(msg or self.kind)
        self.addr = addr
        self.pc = pc
        self.ptr_tag = ptr_tag
        self.mem_tag = mem_tag


class TagMismatch(GuestFault):
    kind = "TagMismatch"


class UnknownObject(GuestFault):
    kind = "UnknownObject"


class OutOfArena(GuestFault):
    kind = "OutOfArena"


class HelperFault(GuestFault):
    kind = "HelperError"


class UnknownHelper(GuestFault):
    kind = "UnknownHelper"
