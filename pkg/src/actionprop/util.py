"""Small shared helpers."""

from __future__ import annotations

import dataclasses

from .errors import ContractError


def from_mapping(cls, mapping: dict, where: str):
    """Build a dataclass from a dict, rejecting unknown keys."""
    if not isinstance(mapping, dict):
        raise ContractError(f"{where}: expected an object, got {type(mapping).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(mapping) - names)
    if unknown:
        raise ContractError(f"{where}: unknown keys {unknown}")
    kwargs = dict(mapping)
    for f in dataclasses.fields(cls):
        if f.name in kwargs and isinstance(kwargs[f.name], list) and f.type.startswith("tuple"):
            kwargs[f.name] = tuple(kwargs[f.name])
    return cls(**kwargs)
