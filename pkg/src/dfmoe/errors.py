"""Exception types raised across dfmoe.

Every error derives from ``DfmoeError`` so the CLI can map library failures
to exit code 2 without catching unrelated exceptions.
"""

from __future__ import annotations


class DfmoeError(Exception):
    """Base class for all dfmoe errors."""


# -- core flow matching ------------------------------------------------------

class SchedulerInvalid(DfmoeError):
    """Scheduler coefficients do not form a convex combination."""


class CouplingInvalid(DfmoeError):
    """Coupling weights are negative or do not sum to 1."""


class InvalidVelocity(DfmoeError):
    """A per-position update factor has negative mass."""


class ZeroMassState(DfmoeError):
    """The marginal path puts (numerically) no mass on the queried state."""


class InstanceTooLarge(DfmoeError):
    """The state space is too large to enumerate."""


class TimeOutOfRange(DfmoeError):
    """A timestep lies outside the horizon of the path."""


class DistributionInvalid(DfmoeError):
    """A table has negative mass or does not sum to 1."""


# -- autoregressive flow -----------------------------------------------------

class PrefixTooLong(DfmoeError):
    """Prefix length exceeds the sequence length."""


class MaskInTarget(DfmoeError):
    """A target sequence with positive mass contains the mask token."""


class NotOneSparse(DfmoeError):
    """The velocity is active at two or more positions at one timestep."""


# -- decentralization / routing ----------------------------------------------

class ZeroClusterMassAtState(DfmoeError):
    """A cluster puts no mass on the queried state."""


class DimensionMismatch(DfmoeError):
    """Expert flows and router weights disagree in shape."""


class ZeroFeatureVector(DfmoeError):
    """A routing feature vector has zero norm."""


class BadK(DfmoeError):
    """Top-k parameter outside [1, K]."""


class EmptyPrefixDistribution(DfmoeError):
    """No expert with positive weight has seen the prefix context."""


class EmptyCluster(DfmoeError):
    """A partition leaves a cluster without members."""


# -- clustering --------------------------------------------------------------

class ZeroVector(DfmoeError):
    """A feature row has zero norm and cannot be normalized."""

    def __init__(self, item_id: str):
        super().__init__(f"feature vector for item {item_id!r} has zero norm")
        self.item_id = item_id


class TooFewItems(DfmoeError):
    """Fewer items than requested clusters."""


# -- experts -----------------------------------------------------------------

class EmptyShard(DfmoeError):
    """An expert was asked to train on no sequences."""


class UnseenContext(DfmoeError):
    """The context was never observed and smoothing is disabled."""

    def __init__(self, context: tuple[int, ...]):
        super().__init__(f"context {context} unseen and alpha=0")
        self.context = context


class EmptyCorpus(DfmoeError):
    """Evaluation requested on an empty corpus."""


class ModelFormatError(DfmoeError):
    """A serialized model has an unknown version or a bad checksum."""


# -- harness -----------------------------------------------------------------

class ConfigInvalid(DfmoeError):
    """The experiment configuration is missing fields or violates bounds."""


class CheckFailed(DfmoeError):
    """A sub-operation of a suite raised; carries the failing check name."""

    def __init__(self, check: str, cause: Exception):
        super().__init__(f"check {check!r} aborted: {cause}")
        self.check = check
        self.cause = cause
