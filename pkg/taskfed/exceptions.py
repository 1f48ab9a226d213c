"""Error taxonomy for the simulator.

Every error raised on purpose by the package derives from TaskFedError so the
CLI can map failures to exit codes without catching unrelated exceptions.
"""

from __future__ import annotations


class TaskFedError(Exception):
    """Root of all simulator errors."""


class InvalidConfig(TaskFedError, ValueError):
    """A parameter violates an operation precondition."""


class ConfigError(TaskFedError):
    """The experiment configuration could not be parsed or validated."""

    def __init__(self, message: str, diagnostics: list[str] | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or []


# Graph validation


class GraphError(TaskFedError, ValueError):
    def __init__(self, message: str, index: tuple[int, ...] | None = None):
        super().__init__(message)
        self.index = index


class TooFewClients(GraphError):
    pass


class AsymmetricWeights(GraphError):
    pass


class NegativeWeight(GraphError):
    pass


class NonzeroDiagonal(GraphError):
    pass


class NonFiniteWeight(GraphError):
    pass


class ZeroDegreeGraph(GraphError):
    pass


class GraphFileError(TaskFedError):
    pass


# Shapes and vectors


class DimensionMismatch(TaskFedError, ValueError):
    pass


class LengthMismatch(TaskFedError, ValueError):
    pass


class RankOutOfRange(TaskFedError, ValueError):
    pass


# Training


class NonFiniteLoss(TaskFedError, ArithmeticError):
    def __init__(self, message: str, client_id: int | None = None):
        super().__init__(message)
        self.client_id = client_id


class StaleCache(TaskFedError):
    pass


class EmptyDataset(TaskFedError, ValueError):
    def __init__(self, message: str, client_id: int | None = None):
        super().__init__(message)
        self.client_id = client_id


# Orchestration


class MissingClient(TaskFedError, KeyError):
    def __init__(self, message: str, client_id: int | None = None):
        super().__init__(message)
        self.client_id = client_id

    def __str__(self) -> str:
        return self.args[0]


class RoundFailed(TaskFedError):
    """A client or aggregation error, annotated with where it happened."""

    def __init__(self, round_: int, client_id: int | None, cause: Exception):
        where = f"round {round_}" + (f", client {client_id}" if client_id is not None else "")
        super().__init__(f"{where}: {cause}")
        self.round = round_
        self.client_id = client_id
