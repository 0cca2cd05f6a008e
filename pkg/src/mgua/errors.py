class MguaError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(MguaError, ValueError):
    """A caller violated an operation's precondition (shape, range, ...)."""


class MeshParseError(MguaError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class MeshValidationError(MguaError):
    pass


class GeometryError(MguaError):
    def __init__(self, element_id: int, message: str):
        super().__init__(f"element {element_id}: {message}")
        self.element_id = element_id


class FormatError(MguaError):
    """A binary or JSON artifact does not match its declared layout."""


class StageError(MguaError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
