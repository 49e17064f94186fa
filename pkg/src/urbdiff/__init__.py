"""Urban change detection from paired multispectral satellite scenes."""

__version__ = "0.1.0"
