"""Exporter error taxonomy.

The command line maps these to exit codes: data problems (manifest,
audio) exit 1, resolution and configuration problems exit 2, anything
unexpected exits 3.
"""


class ExportError(Exception):
    """Base class for everything this package raises on purpose."""


class BadManifest(ExportError):
    """The manifest is unreadable or structurally unusable."""


class AudioTooShort(ExportError):
    """A clip is shorter than the encoder's minimum receptive field."""


class ModelResolutionError(ExportError):
    """The model name does not resolve to a usable checkpoint."""


class ExportConfigError(ExportError):
    """A job parameter (device, batch size) is invalid."""
