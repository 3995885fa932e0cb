"""Exception types shared across the package."""


class CogBiasError(Exception):
    """Base class for all package errors."""


class InvalidVisit(CogBiasError, ValueError):
    pass


class InsufficientVisits(CogBiasError, ValueError):
    """A (sub-)log is too short to yield a rolling window."""

    def __init__(self, have: int, need: int, stage: str | None = None, user_id: str | None = None):
        self.have = have
        self.need = need
        self.stage = stage
        self.user_id = user_id
        where = ""
        if user_id is not None:
            where += f" user={user_id}"
        if stage is not None:
            where += f" stage={stage}"
        super().__init__(f"need at least {need} visits, have {have}{where}")


class ShapeError(CogBiasError, ValueError):
    pass


class NotScalar(CogBiasError, ValueError):
    pass


class NonFiniteError(CogBiasError, FloatingPointError):
    pass


class NonFiniteGradient(NonFiniteError):
    pass


class GraphConsumed(CogBiasError, RuntimeError):
    """backward() was already run on this graph."""


class TrainingDiverged(CogBiasError, RuntimeError):
    pass


class KeyMismatch(CogBiasError, KeyError):
    pass


class InsufficientPoints(CogBiasError, ValueError):
    pass


class DegenerateDesign(UserWarning):
    """Emitted when a regression column had to be dropped to keep the design full-rank."""


class MissingInput(CogBiasError, FileNotFoundError):
    """A CLI stage needs a file produced by an earlier stage."""
