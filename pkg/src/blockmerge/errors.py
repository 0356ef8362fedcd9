"""Exception types raised across the package."""


class BlockMergeError(Exception):
    """Base class for all blockmerge errors."""


# -- tensor archives ---------------------------------------------------------

class MalformedHeader(BlockMergeError):
    """Archive header is structurally invalid (bad length prefix, bad JSON,
    inconsistent offsets or shapes)."""


class UnsupportedDtype(BlockMergeError):
    """Archive declares a dtype outside the supported set."""


class TruncatedData(BlockMergeError):
    """Archive data section is shorter than the header declares."""


# -- task space --------------------------------------------------------------

class AlignmentError(BlockMergeError):
    """Checkpoints do not share names/shapes/dtypes on the mergeable tensors."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class EmptyPartition(BlockMergeError):
    """Every tensor was excluded; nothing left to merge."""


# -- similarity --------------------------------------------------------------

class LengthMismatch(BlockMergeError):
    """Vectors of unequal length passed to a pairwise operation."""


class OverlappingGroups(BlockMergeError):
    """Group-to-group similarity requested for non-disjoint task sets."""


# -- mergers -----------------------------------------------------------------

class EmptyGroup(BlockMergeError):
    """A merge was requested for zero member vectors."""


# -- artifacts ---------------------------------------------------------------

class ConfigMismatch(BlockMergeError):
    """Assignment and task vectors were produced under different configs
    (e.g. a different global trim state)."""


class UnknownTask(BlockMergeError):
    """Task id not present in the artifact manifest."""
