"""Base class and registry for serializable parameter bundles."""

from __future__ import annotations

from typing import ClassVar

import numpy as np

_REGISTRY: dict = {}


def register(cls):
    _REGISTRY[cls.kind] = cls
    return cls


def bundle_class(kind: str):
    # concrete bundles register on import
    from . import framelevel, linear, synthgen  # noqa: F401

    try:
        return _REGISTRY[kind]
    except KeyError:
        raise ValueError(f"unknown model kind {kind!r}") from None


class ParamBundle:
    """Named numpy arrays plus a free-form ``config`` dict.

    Subclasses implement ``named_arrays`` (returning the live arrays, so that
    in-place updates change the bundle) and ``from_arrays``.
    """

    kind: ClassVar[str] = ""

    def named_arrays(self) -> dict:
        raise NotImplementedError

    @classmethod
    def from_arrays(cls, arrays: dict, config: dict):
        raise NotImplementedError

    @property
    def vocab_size(self) -> int:
        raise NotImplementedError

    def dims(self) -> dict:
        return {}

    def copy(self):
        return type(self).from_arrays(
            {k: v.copy() for k, v in self.named_arrays().items()}, dict(self.config)
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.named_arrays().values()])

    def with_flat(self, theta: np.ndarray):
        out = self.copy()
        pos = 0
        for arr in out.named_arrays().values():
            n = arr.size
            arr[...] = theta[pos : pos + n].reshape(arr.shape)
            pos += n
        if pos != theta.size:
            raise ValueError(f"flat vector has {theta.size} entries, bundle has {pos}")
        return out

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        a, b = self.named_arrays(), other.named_arrays()
        return (
            a.keys() == b.keys()
            and all(np.array_equal(a[k], b[k]) for k in a)
            and self.config == other.config
        )

    __hash__ = None
