class ConfigError(ValueError):
    """Invalid configuration or parameter value."""


class DataError(Exception):
    """Corpus, manifest or checkpoint content cannot be used."""


class FeatureFormatError(DataError):
    pass


class BadMagicError(FeatureFormatError):
    pass


class TruncatedPayloadError(FeatureFormatError):
    pass


class ShapeMismatchError(FeatureFormatError):
    pass


class InfeasibleAlignmentError(ValueError):
    """Label cannot be aligned to the given number of frames."""
