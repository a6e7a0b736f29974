"""Text to value coercion shared by config files, CLI overrides and attack spec strings."""
import typing
from enum import Enum
from fractions import Fraction
from typing import Any, List

from .exceptions import ConfigurationError

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_real(text: str) -> float:
    """Parse a real number; fractions such as 8/255 are accepted."""
    try:
        return float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError):
        try:
            return float(text)
        except ValueError:
            raise ConfigurationError(f"not a number: {text!r}") from None


def parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in _TRUE:
        return True
    if lowered in _FALSE:
        return False
    raise ConfigurationError(f"not a boolean: {text!r}")


def coerce(text: str, annotation: Any, key: str = "") -> Any:
    """Convert text to the annotated type (bool, int, float, str, Enum or List of those)."""
    try:
        origin = typing.get_origin(annotation)
        if origin in (list, List):
            (item_type,) = typing.get_args(annotation)
            items = [part for part in text.split(",") if part.strip()]
            return [coerce(part, item_type, key) for part in items]
        if annotation is bool:
            return parse_bool(text)
        if annotation is int:
            value = parse_real(text)
            if value != int(value):
                raise ConfigurationError(f"not an integer: {text!r}")
            return int(value)
        if annotation is float:
            return parse_real(text)
        if isinstance(annotation, type) and issubclass(annotation, Enum):
            return annotation(text.strip().lower())
        return text.strip()
    except (ConfigurationError, ValueError) as e:
        raise ConfigurationError(f"invalid value for {key or 'field'}: {e}") from None


def render(value: Any) -> str:
    """Inverse of coerce for the supported types."""
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(render(v) for v in value)
    return str(value)
