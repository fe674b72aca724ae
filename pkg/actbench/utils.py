# Std lib
from typing import Any, List, Optional, Union
import os
import typing
# Non std lib
import numpy as np


def change_ext(filepath: str, new_ext: str) -> str:
    """

    >>> change_ext("runs/xielu.spec", "csv")
    'runs/xielu.csv'
    """
    return os.path.splitext(filepath)[0] + f".{new_ext}"


def format_real(value: float) -> str:
    """ Text that reads back to the same double

    >>> format_real(0.1)
    '0.10000000000000001'
    >>> format_real(2.0)
    '2'
    """
    return "%.17g" % float(value)


def format_value(value: Any) -> str:
    """ Text form of a config value, as read back by :func:`coerce_value`

    >>> format_value(None), format_value(True), format_value(0.5), format_value("xielu")
    ('none', 'true', '0.5', 'xielu')
    """
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return format_real(value)
    return str(value)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def coerce_value(text: Union[str, int, float, bool, None], annotation: Any) -> Any:
    """ Convert a textual (or YAML-typed) value to the type `annotation` of a dataclass field

    >>> coerce_value("3", int), coerce_value("1e-3", float), coerce_value("Yes", bool)
    (3, 0.001, True)
    >>> coerce_value("none", Optional[float]) is None, coerce_value("1.5", Optional[float])
    (True, 1.5)
    >>> coerce_value("2.5", int)
    Traceback (most recent call last):
    ValueError: invalid literal for int() with base 10: '2.5'
    """
    if typing.get_origin(annotation) is Union:
        args = [arg for arg in typing.get_args(annotation) if arg is not type(None)]
        if text is None or (isinstance(text, str) and text.strip().lower() in {"none", "null", ""}):
            return None
        return coerce_value(text, args[0])
    if text is None:
        raise ValueError(f"A value of type {getattr(annotation, '__name__', annotation)} is required")
    if annotation is bool:
        if isinstance(text, bool):
            return text
        lowered = str(text).strip().lower()
        if lowered in _TRUE:
            return True
        if lowered in _FALSE:
            return False
        raise ValueError(f"Expected a boolean, got `{text}`")
    if annotation is int:
        if isinstance(text, bool):
            raise ValueError(f"Expected an integer, got `{text}`")
        if isinstance(text, float):
            if not text.is_integer():
                raise ValueError(f"Expected an integer, got `{text}`")
            return int(text)
        return int(str(text).strip())
    if annotation is float:
        if isinstance(text, bool):
            raise ValueError(f"Expected a real, got `{text}`")
        return float(str(text).strip()) if isinstance(text, str) else float(text)
    if annotation is str:
        return str(text).strip()
    raise TypeError(f"Unsupported annotation {annotation}")


def spawn_seeds(seed: int, count: int) -> List[int]:
    """ Independent child seeds of a root seed, stable whatever the number of workers

    >>> spawn_seeds(7, 3) == spawn_seeds(7, 3)
    True
    >>> len(set(spawn_seeds(7, 100)))
    100
    """
    children = np.random.SeedSequence(seed).spawn(count)
    return [int(child.generate_state(1, dtype=np.uint32)[0]) for child in children]
