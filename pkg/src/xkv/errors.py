"""Exception hierarchy with stable machine-readable error codes.

Every error raised by the toolkit carries a ``code`` string that the CLI
echoes verbatim in its JSON error output, so scripts can dispatch on it
without parsing messages.
"""

from __future__ import annotations


class XkvError(Exception):
    """Base class for all toolkit errors."""

    code = "Error"

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)


class BadMagic(XkvError):
    code = "BadMagic"


class HeaderMismatch(XkvError):
    code = "HeaderMismatch"


class NonFinite(XkvError):
    code = "NonFinite"


class UnsupportedDtype(XkvError):
    code = "UnsupportedDtype"


class IoFailure(XkvError):
    code = "IoFailure"


class InvalidConfig(XkvError):
    code = "InvalidConfig"


class RankTooLarge(XkvError):
    code = "RankTooLarge"


class EmptySpectrum(XkvError):
    code = "EmptySpectrum"


class GramTooLarge(XkvError):
    code = "GramTooLarge"


class IndivisibleGrouping(XkvError):
    code = "IndivisibleGrouping"


class RanksExceedDims(XkvError):
    code = "RanksExceedDims"


class KeysNotPreRope(XkvError):
    code = "KeysNotPreRope"


class Unachievable(XkvError):
    code = "Unachievable"


class OddHeadDim(XkvError):
    code = "OddHeadDim"


class HeadMismatch(XkvError):
    code = "HeadMismatch"


class ConfigError(XkvError):
    code = "ConfigError"
