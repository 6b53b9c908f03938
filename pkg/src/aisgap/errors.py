"""Typed error hierarchy.

Everything raised on purpose by this package derives from AisGapError so
callers (and the CLI exit-code mapping) can catch one base class.
"""


class AisGapError(Exception):
    pass


# --- NMEA decoding ---

class MalformedSentence(AisGapError):
    pass


class ChecksumMismatch(MalformedSentence):
    pass


class IncompleteFragmentGroup(AisGapError):
    pass


class FieldOutOfRange(AisGapError):
    pass


# --- geometry ---

class EmptyPortDatabase(AisGapError):
    pass


# --- feature extraction ---

class NonMonotonicTime(AisGapError):
    pass


# --- dataset construction ---

class InsufficientSamples(AisGapError):
    def __init__(self, label: bool, available: int, needed: int):
        self.label = label
        self.available = available
        self.needed = needed
        super().__init__(
            f"class {label}: {available} candidates available, {needed} needed"
        )


class MissingPeriod(AisGapError):
    pass


class EmptyDataset(AisGapError):
    pass


# --- encoding ---

class DegenerateRange(AisGapError):
    pass


# --- neural net ---

class ShapeMismatch(AisGapError):
    pass


class OddDimension(AisGapError):
    pass


class InvalidConfig(AisGapError):
    pass


class DivergedLoss(AisGapError):
    pass


# --- model persistence / harnesses ---

class CorruptCheckpoint(AisGapError):
    pass


class VersionMismatch(AisGapError):
    pass


class InvalidGrid(AisGapError):
    pass


class ScenarioMismatch(AisGapError):
    pass
