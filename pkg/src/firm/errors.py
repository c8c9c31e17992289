"""Exception hierarchy shared by every module in the package."""


class FirmError(Exception):
    """Base class for all package errors."""


class ValidationError(FirmError, ValueError):
    """Bad user input: malformed config, unknown names, bad parameters."""


class RegistrySyntaxError(ValidationError):
    def __init__(self, message, line, column):
        super().__init__(f"{message} (line {line}, column {column})")
        self.line = line
        self.column = column


class DuplicateServiceError(ValidationError):
    pass


class UnknownServiceError(ValidationError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class UnknownCompositionError(UnknownServiceError):
    pass


class UnknownDeploymentError(ValidationError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class MissingEntryPointError(ValidationError):
    pass


class ConfigurationError(ValidationError):
    """Registry or composition is structurally unusable (cycles, empty services)."""


class RequestSyntaxError(ValidationError):
    def __init__(self, message, position):
        super().__init__(f"{message} (at offset {position})")
        self.position = position


class NotBlacklistedError(ValidationError):
    pass


class IncompleteCompositionError(FirmError):
    pass


class InvariantViolation(FirmError, RuntimeError):
    """Internal consistency check failed; the simulation must abort."""
