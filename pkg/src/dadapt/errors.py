"""Exception types shared across modules; the CLI maps them to exit codes."""


class DadaptError(Exception):
    pass


class ConfigError(DadaptError, ValueError):
    pass


class BatchCompositionError(DadaptError, ValueError):
    """A minibatch lacks one of the two domains."""


class NonFiniteGradientError(DadaptError, FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


class DivergenceError(DadaptError, FloatingPointError):
    def __init__(self, stage: str, step: int, value: float):
        super().__init__(f"{stage}: non-finite loss {value} at step {step}")
        self.stage = stage
        self.step = step


class CheckpointError(DadaptError):
    """Corrupted, truncated or version-mismatched artifact."""


class PlacementError(DadaptError, RuntimeError):
    """Objects could not be placed under the overlap cap."""


class StageError(DadaptError):
    """Wraps a failure with the pipeline round and stage where it happened."""

    def __init__(self, round_index: int, stage: str, cause: BaseException):
        super().__init__(f"round {round_index}, stage {stage}: {cause}")
        self.round_index = round_index
        self.stage = stage
        self.cause = cause
