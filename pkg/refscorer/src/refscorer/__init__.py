"""Reference external scorer speaking the length-prefixed JSON protocol on stdio."""

__version__ = "0.1.0"

PROTOCOL_VERSION = 1
