"""Three-party secret-shared CNN inference with an analytic cost model."""

__version__ = "0.1.0"

from .costmodel import CostParams, CostReport, LayerCost, network_cost
from .engine import run_secure, secure_forward
from .errors import (AnalysisError, GraphError, ProtocolMisuseError, RangeError,
                     SelectorMissError, ShadownetError, ShapeError, TransportError,
                     WeightsFormatError)
from .ring import RingParams, decode_fixed, encode_fixed, reconstruct, share
from .transport import Session, Transcript, open_session

__all__ = [
    "__version__", "CostParams", "CostReport", "LayerCost", "network_cost", "run_secure",
    "secure_forward", "AnalysisError", "GraphError", "ProtocolMisuseError", "RangeError",
    "SelectorMissError", "ShadownetError", "ShapeError", "TransportError",
    "WeightsFormatError", "RingParams", "decode_fixed", "encode_fixed", "reconstruct", "share",
    "Session", "Transcript", "open_session",
]
