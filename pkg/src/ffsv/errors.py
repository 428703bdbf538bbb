"""Exception types raised across the toolkit."""


class FfsvError(Exception):
    """Base class for toolkit errors."""


class AudioFormatError(FfsvError, ValueError):
    """Malformed RIFF/WAVE container."""


class UnsupportedFormatError(AudioFormatError):
    """Valid WAV, but not 16-bit PCM."""


class EmptyAudioError(FfsvError, ValueError):
    pass


class TooShortError(FfsvError, ValueError):
    """Signal or feature sequence too short for the requested operation."""


class DimensionMismatchError(FfsvError, ValueError):
    pass


class ArchiveFormatError(FfsvError, ValueError):
    """Bad magic, version, or truncated record in a binary artifact."""


class PldaError(FfsvError, ValueError):
    pass


class TrialFormatError(FfsvError, ValueError):
    pass


class MissingEmbeddingError(FfsvError, LookupError):
    def __init__(self, missing):
        self.missing = sorted(missing)
        super().__init__("missing embeddings for ids: " + ", ".join(self.missing))


class ConfigError(FfsvError, ValueError):
    pass
