"""Exception types shared across the package.

Data errors (bad input files, corrupt artifacts) are distinguished from
runtime errors so the CLI can map them to distinct exit codes.
"""


class AbloopError(Exception):
    """Base class for all package errors."""


class DataError(AbloopError):
    """Base class for malformed or unusable input data."""


class ConfigError(AbloopError):
    """Invalid configuration file or schema violation."""


# --- structio ---

class MalformedRecord(DataError):
    pass


class UnknownResidue(DataError):
    pass


class DegenerateGeometry(AbloopError):
    pass


class MaskTooLarge(AbloopError):
    pass


class InsufficientPairs(AbloopError):
    pass


class DegenerateConfiguration(AbloopError):
    pass


# --- so3 / diffusion ---

class InvalidVariance(AbloopError):
    pass


class InvalidRange(AbloopError):
    pass


class ShapeMismatch(AbloopError):
    pass


class EmptyMask(AbloopError):
    pass


# --- denoiser ---

class NonFiniteActivation(AbloopError):
    pass


class NonFiniteGradient(AbloopError):
    pass


class VersionMismatch(DataError):
    pass


class CorruptFile(DataError):
    pass


# --- sampler / oracles / campaign ---

class OracleFailure(AbloopError):
    pass


class LengthMismatch(AbloopError):
    pass


class InsufficientData(AbloopError):
    pass


class NoViableCandidates(AbloopError):
    pass


class AlignmentFailure(AbloopError):
    pass
