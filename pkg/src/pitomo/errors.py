"""Exception and warning types shared across the toolkit."""


class PitomoError(Exception):
    """Base class for all toolkit errors."""


class InvalidBounds(PitomoError):
    """Grid bounds are not strictly ordered."""


class InvalidCount(PitomoError):
    """A cell/sample count is not a positive integer."""


class InvalidChord(PitomoError):
    """Chord endpoints coincide or the beam width is negative."""


class EmptyChordSet(PitomoError):
    """A contribution matrix was requested for zero chords."""


class ShapeMismatch(PitomoError):
    """Array shapes are inconsistent with the declared dimensions."""


class DegenerateSample(PitomoError):
    """A per-sample normalizer (max |x| or max y) is zero."""


class InvalidRatios(PitomoError):
    """Split ratios are non-positive or do not sum to one."""


class InvalidRule(PitomoError):
    """Phantom assignment-rule parameters violate their invariants."""


class StoreIOError(PitomoError):
    """Filesystem-level failure while reading or writing a store."""


class FormatError(PitomoError):
    """A persisted blob or manifest fails validation."""


class InvalidSpec(PitomoError):
    """A model spec is internally inconsistent."""


class SpecMismatch(PitomoError):
    """A checkpoint's stored spec differs from the expected one."""


class MissingPI(PitomoError):
    """A physics-informed model was run without its contribution matrix."""


class SpatialUnderflow(PitomoError):
    """Pooling would reduce a spatial dimension below one."""


class NonFiniteLoss(PitomoError):
    """Training produced a NaN/inf loss; carries the offending step."""


class ConfigError(PitomoError):
    """A CLI configuration file fails schema validation."""


class DegenerateLossWarning(UserWarning):
    """Physics residual is exactly zero, so its adaptive weight is disabled."""


class ZeroRowWarning(UserWarning):
    """One or more chords never intersect the grid."""
