"""Exception hierarchy shared across the simulator."""


class HiersimError(Exception):
    """Base class for all simulator errors."""


class ValidationError(HiersimError):
    """Bad user-supplied input (scenario, config, log). CLI exit code 2."""


class InvalidStateError(ValidationError):
    """Non-finite or out-of-domain agent state or feature."""


class HistoryDiscontinuityError(ValidationError):
    """A scene was pushed whose time does not follow the last entry by dt."""


class OffMapError(HiersimError):
    """Agent is beyond the recovery radius of its route."""

    def __init__(self, agent_id, offset):
        super().__init__(f"agent {agent_id} is {offset:.2f} m off its route")
        self.agent_id = agent_id
        self.offset = offset


class ArityError(ValidationError):
    """Wrong number of preceding commands for a sub-game state."""


class ShapeError(ValidationError):
    """Mismatched array shapes passed to a loss or metric."""


class OrderingError(ValidationError):
    """Records passed to the metrics accumulator are not time-ordered."""


class ScenarioError(ValidationError):
    """Structural problem in a scenario file."""


class UnknownFieldError(ScenarioError):
    def __init__(self, field, where="scenario"):
        super().__init__(f"unknown field {field!r} in {where}")
        self.field = field


class ResolutionError(ScenarioError):
    def __init__(self, kind, name, where=""):
        msg = f"unresolved {kind} {name!r}"
        if where:
            msg += f" referenced by {where}"
        super().__init__(msg)
        self.kind = kind
        self.name = name


class VersionError(ScenarioError):
    pass


class TrainingDivergenceError(HiersimError):
    """Non-finite gradient or loss during training. CLI exit code 3."""
