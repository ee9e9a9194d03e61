"""Exception types shared across the toolkit.

Every error raised on a contract violation subclasses VoqaError so callers
can catch toolkit failures in one place. The CLI maps these onto exit codes:
data-shaped problems exit 1, configuration problems exit 2, everything else 3.
"""


class VoqaError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(VoqaError):
    """A configuration value is invalid or inconsistent."""


# ---- audio ----

class FormatError(VoqaError):
    """A file does not parse as the expected container format."""


class UnsupportedEncoding(VoqaError):
    """The container parsed but the sample encoding is not supported."""


class EmptyAudio(VoqaError):
    """A decoded waveform contains zero samples."""


# ---- low-level descriptors ----

class TooShort(VoqaError):
    """Input signal is shorter than one analysis frame."""


class InsufficientCycles(VoqaError):
    """Not enough consecutive glottal cycles for a perturbation measure."""


class DegenerateAmplitude(VoqaError):
    """All cycle peak amplitudes are zero; shimmer is undefined."""


class NoVoicedFrames(VoqaError):
    """No frame passed the voicing decision; voiced-only measures undefined."""


class MissingLLD(VoqaError):
    """A descriptor vector could not be measured for an utterance."""


# ---- embedding stacks ----

class CorruptStack(VoqaError):
    """Stack file payload does not match its declared size or checksum."""


class NonFiniteValues(VoqaError):
    """An array that must be finite contains NaN or infinity."""


class MissingEmbeddings(VoqaError):
    """Rows need stack files that are absent on disk."""

    def __init__(self, rows):
        self.rows = list(rows)
        listing = ", ".join(str(r) for r in self.rows[:20])
        more = "" if len(self.rows) <= 20 else f" (+{len(self.rows) - 20} more)"
        super().__init__(f"missing embedding stacks for: {listing}{more}")


# ---- model ----

class ShapeError(VoqaError):
    """Tensor shapes are inconsistent with the declared configuration."""


class CalledBeforeForward(VoqaError):
    """backward() invoked with no cached forward pass."""


class NonFiniteGradient(VoqaError):
    """A gradient turned NaN or infinite; the training step is aborted."""


# ---- training / metrics ----

class DegenerateScale(VoqaError):
    """Loss weighting is undefined because the label scale collapsed."""


class UndefinedCorrelation(VoqaError):
    """Correlation undefined: one of the inputs has zero variance."""


class InsufficientSpeakers(VoqaError):
    """Too few speakers for the requested split."""


# ---- orchestration ----

class InvalidManifest(VoqaError):
    """A manifest failed validation or selects no usable rows."""

    def __init__(self, message, issues=()):
        self.issues = list(issues)
        super().__init__(message)


# ---- noise ----

class DegenerateSignal(VoqaError):
    """Signal power is zero; an SNR-relative operation is undefined."""


class FileError(VoqaError):
    """A referenced file is missing or unreadable."""
