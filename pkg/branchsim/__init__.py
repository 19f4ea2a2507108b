from __future__ import annotations

from types import ModuleType

__version__ = "0.1.0"

from . import config, engine, errors, measure, record, scenarios, stats  # noqa: E402
from . import cli  # noqa: E402,F401

_modules = (errors, measure, config, engine, stats, scenarios, record)


def _exported(module: ModuleType, name: str, value: object) -> bool:
    if name.startswith("_") or isinstance(value, ModuleType):
        return False
    owner = getattr(value, "__module__", None)
    if owner is None or not callable(value):
        # plain constants only when the module defines them in upper case
        return name.isupper() and name in vars(module)
    return owner == module.__name__


for _module in _modules:
    for _name in dir(_module):
        _value = getattr(_module, _name)
        if _exported(_module, _name, _value):
            globals()[_name] = _value

__all__ = sorted(
    name for module in _modules for name in dir(module)
    if _exported(module, name, getattr(module, name))
)
