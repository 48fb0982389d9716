from typing import Optional


class SplittingSamplerException(Exception):
    def __init__(self, message: str):
        super().__init__(message)


class InvalidParams(SplittingSamplerException):
    def __init__(self, message: str, field: str):
        super().__init__(message)
        self.field = field


class ConfigError(SplittingSamplerException):
    def __init__(self, message: str, field: Optional[str] = None,
                 line: Optional[int] = None):
        super().__init__(message)
        self.field = field
        self.line = line


class DegenerateMarginal(SplittingSamplerException):
    def __init__(self, message: str, t: float):
        super().__init__(message)
        self.t = t


class NonPSDError(SplittingSamplerException):
    def __init__(self, message: str):
        super().__init__(message)


class ContractError(SplittingSamplerException):
    def __init__(self, message: str):
        super().__init__(message)


class ProviderError(SplittingSamplerException):
    def __init__(self, message: str):
        super().__init__(message)


class NonFiniteState(SplittingSamplerException):
    def __init__(self, message: str, step_index: int, field: str):
        super().__init__(message)
        self.step_index = step_index
        self.field = field
