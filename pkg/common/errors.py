class InstanceError(ValueError):
    pass


class InfeasibleUserError(InstanceError):

    def __init__(self, user: int):
        super().__init__(f"user {user} has no transmission point with a positive rate")
        self.user = user


class ConfigError(ValueError):
    pass


class MatroidError(ValueError):
    pass


class GpStructureError(ValueError):
    pass


class BoundViolation(AssertionError):
    pass


class SolverError(RuntimeError):

    def __init__(self, message: str, history: list[float] | None = None):
        super().__init__(message)
        self.history = history if history is not None else []


class InfeasibleProblemError(SolverError):
    pass
