"""Exception hierarchy; the CLI maps each family to an exit code."""


class PolymerError(Exception):
    """Base class for all library errors."""


class ConfigError(PolymerError, ValueError):
    """Invalid model or run configuration (exit code 2)."""


class NumericalError(PolymerError, ArithmeticError):
    """A computation could not be carried out reliably (exit code 3)."""


class ResourceCapError(PolymerError):
    """A size or memory cap would be exceeded (exit code 4)."""


class WalkError(ConfigError):
    """Invalid reference walk."""


class DegenerateWalkError(WalkError):
    """Walk with a single step: the entropy criterion is undefined."""


class EnumerationTooLarge(ResourceCapError):
    """Path enumeration would exceed its cap."""


class WindowError(ConfigError):
    """A field sample does not cover the sites a computation needs."""


class FieldError(ConfigError):
    """Invalid or unsupported field parameters."""


class PreconditionError(ConfigError):
    """Arguments violate a documented precondition."""


class RegenerationError(NumericalError):
    """Not enough regeneration times inside the allowed horizon."""


EXIT_CODES = (
    (ResourceCapError, 4),
    (NumericalError, 3),
    (ConfigError, 2),
)


def exit_code(exc: BaseException) -> int:
    for cls, code in EXIT_CODES:
        if isinstance(exc, cls):
            return code
    return 1
