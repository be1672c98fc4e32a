"""Exception types raised across the pipeline."""


class XrayQCError(Exception):
    """Base class for all pipeline errors."""


class ImageFormatError(XrayQCError, ValueError):
    """Malformed PNM header or magic number."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedDepthError(ImageFormatError):
    """PNM maxval other than the one this reader handles."""


class SizeMismatchError(ImageFormatError):
    """Payload length disagrees with the header dimensions."""


class DegenerateBoundsError(XrayQCError, ValueError):
    """Lower and upper equalization bounds coincide (or cross)."""


class IndexFormatError(XrayQCError, ValueError):
    """Bad dataset index CSV."""


class CheckpointFormatError(XrayQCError, ValueError):
    """Bad head checkpoint or feature CSV."""


class ConfigurationError(XrayQCError, ValueError):
    """Invalid run, training or generator configuration."""
