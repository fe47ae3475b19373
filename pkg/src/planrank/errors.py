"""Exception types shared across the package.

Every error raised by planrank derives from PlanRankError so callers can
catch the whole family; the CLI maps each class to a distinct exit code.
"""

from __future__ import annotations


class PlanRankError(Exception):
    """Base class for all planrank errors."""


# --- plan parsing / encoding ---------------------------------------------

class MalformedDocument(PlanRankError):
    """Plan JSON is missing required keys or has values of the wrong type."""


class UnsupportedArity(PlanRankError):
    """A plan node has more than two children."""


class EmptyCorpus(PlanRankError):
    """A feature scaler was fitted on an empty plan collection."""


# --- hint catalog ---------------------------------------------------------

class DuplicateHintSet(PlanRankError):
    """Two catalog entries carry the same flag assignment."""


class InvalidHintSet(PlanRankError):
    """A hint set disables every join knob or every scan knob."""


class MissingDefault(PlanRankError):
    """Catalog entry 0 is not the all-enabled hint set."""


# --- numerical kernel -----------------------------------------------------

class DimensionMismatch(PlanRankError):
    """Layer and input dimensions disagree."""


class ShapeMismatch(PlanRankError):
    """Parameter and gradient shapes disagree."""


class NonFiniteGradient(PlanRankError):
    """A gradient entry is NaN or infinite; the optimizer step is aborted."""


class EmptyTree(PlanRankError):
    """An operation that needs at least one node received an empty tree."""


# --- scorer / checkpoints -------------------------------------------------

class EmptyCandidates(PlanRankError):
    """Hint selection was asked to choose among zero candidates."""


class FormatVersionMismatch(PlanRankError):
    """Checkpoint file was written by an incompatible format version."""


class CorruptChecksum(PlanRankError):
    """Checkpoint file is truncated or its checksum does not match."""


# --- losses / labels ------------------------------------------------------

class NonPositiveLatency(PlanRankError):
    """Latency labels must be strictly positive."""


class EmptyList(PlanRankError):
    """Listwise loss requires at least one item."""


# --- training -------------------------------------------------------------

class EmptyDataset(PlanRankError):
    """Training or sample building received no queries."""


class NonFiniteLoss(PlanRankError):
    """Training loss became NaN or infinite."""


class MissingLatency(PlanRankError):
    """A candidate plan has no recorded latency."""


# --- datastore ------------------------------------------------------------

class SchemaViolation(PlanRankError):
    """A record file line does not match the execution-record schema."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class MissingDefaultPlan(PlanRankError):
    """A query has no record for hint set 0."""


class InsufficientTemplates(PlanRankError):
    """Holdout asks for at least as many templates as the dataset has."""


class InsufficientQueriesPerTemplate(PlanRankError):
    """Holdout asks for at least as many queries as some template has."""


class DuplicateQueryId(PlanRankError):
    """Two datasets being merged share a query id."""


# --- gateway --------------------------------------------------------------

class SqlError(PlanRankError):
    """The DBMS rejected a statement; carries the server message."""


class MissingRecord(PlanRankError):
    """A replay source has no record for the requested (query, hint set)."""


# --- evaluation -----------------------------------------------------------

class EmptyTestSet(PlanRankError):
    """Evaluation received no test queries."""


class NonPositiveTotal(PlanRankError):
    """Speedup requires strictly positive latency totals."""


class TooFewPlans(PlanRankError):
    """Spectrum analysis needs at least two unique plans."""


# --- cli ------------------------------------------------------------------

class CatalogMismatch(PlanRankError):
    """Checkpoint and requested catalog disagree; scoring refused."""
