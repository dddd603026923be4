"""Two-stage mitotic figure detection pipeline components."""

__version__ = "0.1.0"

PROTOCOL_VERSION = 1

from mitodet.errors import DataError, MitodetError, ProtocolError

__all__ = ["DataError", "MitodetError", "ProtocolError", "PROTOCOL_VERSION", "__version__"]
