"""Dotted-path views over nested parameter containers (dataclasses, dicts, lists, tuples)."""
from __future__ import annotations

import dataclasses

import numpy as np


def _children(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return [(f.name, getattr(obj, f.name)) for f in dataclasses.fields(obj)]
    if isinstance(obj, dict):
        return list(obj.items())
    if isinstance(obj, (list, tuple)):
        return [(str(i), v) for i, v in enumerate(obj)]
    return []


def flatten(obj, prefix: str = "") -> dict[str, np.ndarray]:
    """All ndarray leaves keyed by dotted path; scalars and ``None`` are skipped."""
    out: dict[str, np.ndarray] = {}
    if isinstance(obj, np.ndarray):
        out[prefix] = obj
        return out
    for name, child in _children(obj):
        key = f"{prefix}.{name}" if prefix else name
        out.update(flatten(child, key))
    return out


def replace_leaf(obj, path: str, value):
    """Copy of ``obj`` with the leaf at ``path`` swapped for ``value``; siblings are shared."""
    head, _, rest = path.partition(".")
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        child = getattr(obj, head)
        return dataclasses.replace(obj, **{head: replace_leaf(child, rest, value) if rest else value})
    if isinstance(obj, dict):
        new = dict(obj)
        new[head] = replace_leaf(obj[head], rest, value) if rest else value
        return new
    if isinstance(obj, (list, tuple)):
        i = int(head)
        items = list(obj)
        items[i] = replace_leaf(obj[i], rest, value) if rest else value
        return type(obj)(items)
    raise KeyError(path)
