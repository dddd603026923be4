"""Package-wide exception types, mapped onto CLI exit codes."""


class MitodetError(Exception):
    """Base class for all package errors."""


class DataError(MitodetError):
    """Invalid input data: manifests, images, predictions (CLI exit code 2)."""


class ManifestError(DataError):
    """Manifest failed to parse or validate; carries one message per offending record."""

    def __init__(self, message: str, errors: list[str] | None = None):
        super().__init__(message)
        self.errors = errors or []

    def __str__(self) -> str:
        base = super().__str__()
        if self.errors:
            return base + "\n" + "\n".join("  - " + e for e in self.errors)
        return base


class ProtocolError(MitodetError):
    """External scorer/detector subprocess misbehaved (CLI exit code 3)."""
