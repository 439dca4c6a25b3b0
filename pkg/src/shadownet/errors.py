class ShadownetError(Exception):
    """Base class for all errors raised by this package."""


class RangeError(ShadownetError, ValueError):
    pass


class ShapeError(ShadownetError, ValueError):
    pass


class ProtocolMisuseError(ShadownetError):
    pass


class TransportError(ShadownetError):
    """Channel setup or delivery failed; ``edge`` names the (sender, receiver) pair."""

    def __init__(self, msg, edge=None):
        super().__init__(msg)
        self.edge = edge


class GraphError(ShadownetError, ValueError):
    """Parse or validation failure; ``problems`` lists every violation found."""

    def __init__(self, msg, problems=None):
        super().__init__(msg)
        self.problems = list(problems or [msg])


class SelectorMissError(ShadownetError):
    """A rewrite selector matched no layer (warning-level, CLI exit code 2)."""


class AnalysisError(ShadownetError):
    pass


class WeightsFormatError(ShadownetError, ValueError):
    pass
