"""Exception hierarchy shared by every subsystem."""


class PeEvadeError(Exception):
    """Base class for all errors raised by this package."""


class NotPe(PeEvadeError):
    """The byte stream lacks the MZ or PE signature."""


class Malformed(PeEvadeError):
    """The byte stream has PE signatures but violates the strict layout rules."""


class LayoutOverflow(PeEvadeError):
    """Headers cannot grow without colliding with section data."""


class ActionUnavailable(PeEvadeError):
    """A mutation cannot be carried out on this input."""


class DegenerateData(PeEvadeError):
    """Training or calibration data holds a single class."""


class DimensionMismatch(PeEvadeError):
    """A feature vector has the wrong length."""


class EpisodeFinished(PeEvadeError):
    """step() was called on an episode that is already over (or never armed)."""


class NotEvaded(PeEvadeError):
    """harvest_evader() was called on an episode that did not evade."""


class NonFiniteLoss(PeEvadeError):
    """A TD update produced a NaN or infinite loss."""


class EmptyCorpus(PeEvadeError):
    """Agent training was given no samples."""


class NoEvaders(PeEvadeError):
    """Adversarial retraining was requested without any evasive samples."""


class ConfigError(PeEvadeError):
    """A campaign or CLI configuration value is invalid."""
