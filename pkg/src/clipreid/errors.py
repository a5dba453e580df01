"""Exception types raised across the package."""


class CLIPReIDError(Exception):
    pass


class ConfigError(CLIPReIDError, ValueError):
    pass


class ContractError(CLIPReIDError, ValueError):
    """An input violates an operation's precondition."""


class UnknownTokenError(CLIPReIDError, KeyError):
    def __init__(self, word):
        super().__init__(f"unknown token: {word!r}")
        self.word = word

    def __str__(self):
        return self.args[0]


class ContextOverflowError(CLIPReIDError, ValueError):
    pass


class IdentityRangeError(ContractError, IndexError):
    pass


class CameraRangeError(ContractError, IndexError):
    pass


class NumericalError(CLIPReIDError, ArithmeticError):
    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class TrainingError(CLIPReIDError, RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class FreezeViolationError(TrainingError):
    pass


class MissingDependencyError(CLIPReIDError, FileNotFoundError):
    """A prerequisite run artifact (checkpoint, cache) is absent."""
