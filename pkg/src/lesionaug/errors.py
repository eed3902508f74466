class LesionAugError(Exception):
    """Base class for pipeline errors."""


class ValidationError(LesionAugError, ValueError):
    pass


class LoadError(LesionAugError, OSError):
    pass


class StateError(LesionAugError, RuntimeError):
    pass


class TrainingError(LesionAugError, RuntimeError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class GenerationError(LesionAugError, RuntimeError):
    pass


class MetricError(LesionAugError, ValueError):
    pass


class StageError(LesionAugError, RuntimeError):
    def __init__(self, stage: str, fold: int | None, cause: BaseException):
        where = f"fold {fold}, " if fold is not None else ""
        super().__init__(f"{where}stage '{stage}' failed: {cause}")
        self.stage = stage
        self.fold = fold
        self.cause = cause
