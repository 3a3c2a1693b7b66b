"""Exception hierarchy.

Every runtime error carries a short ``code`` (the class name) that is used on
the wire, in control-socket replies and in CLI diagnostics. Device-level
errors also have a numeric ``status`` so the proxy can ship them back in a
reply slot.
"""


class CrumError(Exception):
    status = 99

    @property
    def code(self):
        return type(self).__name__


# device model
class AlreadyInitialized(CrumError):
    status = 1


class NotInitialized(CrumError):
    status = 2


class OutOfArena(CrumError):
    status = 3


class UnknownRegion(CrumError):
    status = 4


class UnknownStream(CrumError):
    status = 5


class UnknownKernel(CrumError):
    status = 6


class UnknownEvent(CrumError):
    status = 7


class RangeOutOfBounds(CrumError):
    status = 8


class InvalidArgument(CrumError):
    status = 9


class KernelFault(CrumError):
    """A kernel failed while the device drained its streams."""

    status = 10

    def __init__(self, msg, stream=None, task_index=None, cause=None):
        super().__init__(msg)
        self.stream = stream
        self.task_index = task_index
        self.cause = cause


# transport
class ChannelClosed(CrumError):
    status = 20


class ProxyGone(ChannelClosed):
    status = 21


class VersionMismatch(CrumError):
    status = 22


class NoProxy(CrumError):
    status = 23


class RemoteGone(CrumError):
    status = 24


class PartialTransfer(CrumError):
    status = 25


class ProtocolError(CrumError):
    status = 26


class DeferredCallError(CrumError):
    """A pipelined (non-blocking) call failed; raised at the next flush."""

    status = 27

    def __init__(self, seq, opcode, status, msg=""):
        super().__init__(f"call seq={seq} opcode={opcode} failed with status {status}: {msg}")
        self.seq = seq
        self.opcode = opcode
        self.call_status = status
        self.detail = msg

    @property
    def cause(self):
        return error_class(self.call_status)


# session / shadow memory
class SessionStateError(CrumError):
    status = 30


class WrongThread(CrumError):
    status = 31


class CycleViolation(CrumError):
    status = 32


class MapFailed(CrumError):
    status = 33


class Overlap(CrumError):
    status = 34


class NotShadowAddress(CrumError):
    """A fault outside every shadow region: not ours to resolve."""

    status = 35


# checkpoint / restart
class DrainFailed(CrumError):
    status = 40


class WriteFailed(CrumError):
    status = 41


class ConcurrentCheckpoint(CrumError):
    status = 42


class RestoreFailed(CrumError):
    """Base for every reason a restore can fail."""

    status = 46


class CrcMismatch(RestoreFailed):
    status = 43


class ReplayDivergence(RestoreFailed):
    status = 44


class AddressUnavailable(RestoreFailed):
    status = 45


class LiveDeviceAllocations(CrumError):
    status = 47


_BY_STATUS = {}
_BY_CODE = {}


def _index(cls):
    for sub in cls.__subclasses__():
        _BY_STATUS[sub.status] = sub
        _BY_CODE[sub.__name__] = sub
        _index(sub)


_index(CrumError)


def error_class(status):
    return _BY_STATUS.get(status, CrumError)


def from_status(status, msg=""):
    return error_class(status)(msg)


def from_code(code, msg=""):
    return _BY_CODE.get(code, CrumError)(msg)
