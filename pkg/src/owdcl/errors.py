"""Exception hierarchy. Every error carries a stable machine-readable ``code``."""


class OWDCLError(Exception):
    code = "OWDCL_ERROR"


class ZeroVector(OWDCLError, ValueError):
    code = "ZERO_VECTOR"


class DimensionMismatch(OWDCLError, ValueError):
    code = "DIMENSION_MISMATCH"


class DegenerateVariance(OWDCLError, ValueError):
    code = "DEGENERATE_VARIANCE"


class EmptyBatch(OWDCLError, ValueError):
    code = "EMPTY_BATCH"


class NonFiniteLoss(OWDCLError, FloatingPointError):
    code = "NON_FINITE_LOSS"


class InsufficientClassSamples(OWDCLError, ValueError):
    code = "INSUFFICIENT_CLASS_SAMPLES"


class AngleOutOfRange(OWDCLError, ValueError):
    code = "ANGLE_OUT_OF_RANGE"


class NonUnitNorm(OWDCLError, ValueError):
    code = "NON_UNIT_NORM"


class EmptyPrototypeBank(OWDCLError, ValueError):
    code = "EMPTY_PROTOTYPE_BANK"


class LabelNotInBank(OWDCLError, IndexError):
    code = "LABEL_NOT_IN_BANK"


class EmptyCenters(OWDCLError, ValueError):
    code = "EMPTY_CENTERS"


class SpecInvalid(OWDCLError, ValueError):
    code = "SPEC_INVALID"


class FormatError(OWDCLError, ValueError):
    code = "FORMAT_ERROR"


class UndefinedMetric(OWDCLError, ZeroDivisionError):
    code = "UNDEFINED_METRIC"


class ConfigError(OWDCLError, ValueError):
    code = "CONFIG_ERROR"
