"""Exception hierarchy shared across the BioNet modules.

Every error that can cross a node boundary carries a one-byte ``code`` so it
can travel inside an ERROR wire message and be re-raised on the caller's side.
"""

from __future__ import annotations


class BioNetError(Exception):
    """Base class; ``code`` is the wire-level error byte."""

    code = 0x00

    def __init__(self, message: str = ""):
        super().__init__(message or self.__class__.__name__)


# -- template layer ---------------------------------------------------------

class SpacingInfeasible(BioNetError):
    code = 0x01


class OutOfBounds(BioNetError):
    code = 0x02


class BadMagic(BioNetError):
    code = 0x03


class BadTemplateVersion(BioNetError):
    code = 0x04


class Truncated(BioNetError):
    code = 0x05


# -- matcher ----------------------------------------------------------------

class InsufficientMinutiae(BioNetError):
    code = 0x10


# -- wire / transport -------------------------------------------------------

class BadPin(BioNetError):
    code = 0x20


class AuthFail(BioNetError):
    code = 0x21


class CounterExhausted(BioNetError):
    code = 0x22


class FrameTooLarge(BioNetError):
    code = 0x23


class BadFrameVersion(BioNetError):
    code = 0x24


class UnknownType(BioNetError):
    code = 0x25


class TransportError(BioNetError):
    code = 0x26


# -- shard / cluster --------------------------------------------------------

class WrongShard(BioNetError):
    code = 0x30


class DuplicateIdentity(BioNetError):
    code = 0x31


class UnknownIdentity(BioNetError):
    code = 0x32


class BadSelection(BioNetError):
    code = 0x33


class MemberUnreachable(BioNetError):
    code = 0x34


# -- harness ----------------------------------------------------------------

class ConfigInvalid(BioNetError):
    code = 0x40


_BY_CODE = {
    cls.code: cls
    for cls in list(globals().values())
    if isinstance(cls, type) and issubclass(cls, BioNetError) and cls is not BioNetError
}


def error_for_code(code: int, message: str = "") -> BioNetError:
    """Rebuild the exception a remote node reported inside an ERROR message."""
    cls = _BY_CODE.get(code, BioNetError)
    err = cls(message)
    err.code = code
    return err
