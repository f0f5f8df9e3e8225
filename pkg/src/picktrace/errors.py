"""Exception types shared across the package.

Every error raised by picktrace derives from :class:`PicktraceError`, so
callers can catch one base class at pipeline boundaries (the CLI does).
"""


class PicktraceError(Exception):
    """Base class for all picktrace errors."""


# --- ingest ---------------------------------------------------------------

class MalformedHeader(PicktraceError):
    """A CSV header does not match the expected column set."""


class MalformedRow(PicktraceError):
    """A CSV row failed to parse; the message reports the 1-based line."""


class EmptyFile(PicktraceError):
    """A file contained no data rows."""


class DuplicateKey(PicktraceError):
    """Two records share a (harvest_date, cart_id) key."""


class IoFailure(PicktraceError):
    """Underlying I/O error while writing an artifact."""


class WeekRollover(PicktraceError):
    """A session's GPS time of week wraps across a week boundary."""


# --- annotate -------------------------------------------------------------

class DegeneratePolygon(PicktraceError):
    """Boundary polygon has fewer than 3 vertices or self-intersects."""


class SessionTooShort(PicktraceError):
    """Session has fewer samples than the requested smoothing window."""


# --- model ----------------------------------------------------------------

class ConfigInvalid(PicktraceError):
    """A model or generator configuration violates its invariants."""


class ShapeMismatch(PicktraceError):
    """Batch shape is inconsistent with the model configuration."""


class NoLabeledData(PicktraceError):
    """Training requires sessions with activity labels."""


class InsufficientWindows(PicktraceError):
    """Too few windows to form a train/validation split."""


class FeatureMismatch(PicktraceError):
    """Feature channels do not match the model's feature set."""


class UnknownDate(PicktraceError):
    """A held-out date is not present in the provided sessions."""


# --- efficiency -----------------------------------------------------------

class NoPickActivity(PicktraceError):
    """A label sequence contains no Pick samples; no report can be made."""


class ZeroHarvestTime(PicktraceError):
    """Harvest time after break excision is not positive."""


class NoTrays(PicktraceError):
    """Tray fill time is undefined for a zero tray count."""


class TooFewValues(PicktraceError):
    """IQR filtering requires at least 4 values."""


# --- evaluate -------------------------------------------------------------

class LengthMismatch(PicktraceError):
    """Compared label sequences have different lengths."""


class ZeroGroundTruth(PicktraceError):
    """Estimation accuracy is undefined for non-positive ground truth."""


class BreakCountUnsatisfiable(UserWarning):
    """Fewer break candidates were found than the break log expects.

    Emitted as a warning: detection proceeds with the candidates found.
    """
