class BaseError(Exception):
    pass


class DecodeError(BaseError):
    pass


class ScheduleError(BaseError):
    pass


class ConditioningError(BaseError):
    pass


class DivergenceError(BaseError):
    pass


class EmptySubsetError(BaseError):
    def __init__(self, class_id: int) -> None:
        super().__init__(f"Classifier predicted no training images as class {class_id}")
        self.class_id = class_id


class ValidationError(BaseError):
    pass


class MissingArtifactError(BaseError):
    def __init__(self, path: str, phase: str) -> None:
        super().__init__(f"Missing {path}, run '{phase}' first")
        self.path = path
        self.phase = phase


class BridgeError(BaseError):
    pass
