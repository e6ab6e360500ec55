"""Exception types shared across the condensation toolkit.

Every failure the library raises on purpose derives from CondensationError so
callers can catch one base class at the CLI boundary. Subclasses mark which
contract was violated; messages carry the offending value or file.
"""


class CondensationError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(CondensationError):
    """A config value is missing, of the wrong type, or out of range."""


class PlanError(ConfigError):
    """A temporal sampling plan is internally inconsistent."""


class FormatError(CondensationError):
    """An on-disk artifact is malformed, truncated, or fails its checksum."""


class CompatibilityError(CondensationError):
    """Two artifacts that must agree (arch, shapes, hashes) do not."""


class SelectionError(CondensationError):
    """A selection request cannot be satisfied (e.g. class smaller than ipc)."""


class StatsError(CondensationError):
    """Activation-statistics collection hit missing classes or empty data."""


class TrainingError(CondensationError):
    """Optimization produced a non-finite loss or diverged past a guard."""


class DegenerateSegmentError(TrainingError):
    """An expert trajectory segment moved less than the denominator floor."""


class EvalError(TrainingError):
    """Evaluation training failed; message carries the seed and epoch."""


class CacheError(CondensationError):
    """A cache entry exists but does not match its recorded checksums."""


class StageError(CondensationError):
    """A pipeline stage failed; the message names the stage id."""
