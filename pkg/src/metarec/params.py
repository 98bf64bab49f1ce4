"""Named float64 parameter collections and the descent update primitive."""

from __future__ import annotations

from typing import Dict, Iterator, Tuple, Union

import numpy as np

from .errors import ConfigError, NumericError

__all__ = ["ParamSet", "Gradient", "axpy_update"]


class ParamSet:
    """Ordered, named collection of float64 arrays.

    Insertion order of names is the canonical order used by flattening and by
    every elementwise operation.  All arrays are owned (never views of caller
    storage) and always float64.
    """

    def __init__(self, entries: Dict[str, np.ndarray]):
        self._entries: Dict[str, np.ndarray] = {}
        for name, arr in entries.items():
            self._entries[name] = np.array(arr, dtype=np.float64)

    # -- container protocol -------------------------------------------------

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=np.float64)
        if name in self._entries and value.shape != self._entries[name].shape:
            raise ConfigError(
                f"shape mismatch for '{name}': {value.shape} vs {self._entries[name].shape}"
            )
        self._entries[name] = value.copy()

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> Tuple[str, ...]:
        return tuple(self._entries)

    def items(self):
        return self._entries.items()

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {k: v.shape for k, v in self._entries.items()}

    def __repr__(self) -> str:
        dims = ", ".join(f"{k}{list(v.shape)}" for k, v in self._entries.items())
        return f"ParamSet({dims})"

    # -- arithmetic ----------------------------------------------------------

    def _check_same_layout(self, other: "ParamSet") -> None:
        if self.names() != other.names():
            raise ConfigError(f"name mismatch: {self.names()} vs {other.names()}")
        for name in self._entries:
            if self._entries[name].shape != other._entries[name].shape:
                raise ConfigError(
                    f"shape mismatch for '{name}': "
                    f"{self._entries[name].shape} vs {other._entries[name].shape}"
                )

    def add(self, other: "ParamSet") -> "ParamSet":
        self._check_same_layout(other)
        return ParamSet({k: v + other._entries[k] for k, v in self._entries.items()})

    def sub(self, other: "ParamSet") -> "ParamSet":
        self._check_same_layout(other)
        return ParamSet({k: v - other._entries[k] for k, v in self._entries.items()})

    def scale(self, c: float) -> "ParamSet":
        c = float(c)
        return ParamSet({k: v * c for k, v in self._entries.items()})

    def mul(self, other: "ParamSet") -> "ParamSet":
        """Elementwise product (used by per-parameter learning-rate vectors)."""
        self._check_same_layout(other)
        return ParamSet({k: v * other._entries[k] for k, v in self._entries.items()})

    def dot(self, other: "ParamSet") -> float:
        self._check_same_layout(other)
        total = 0.0
        for k, v in self._entries.items():
            total += float(np.dot(v.ravel(), other._entries[k].ravel()))
        return total

    def norm(self) -> float:
        return float(np.sqrt(self.dot(self)))

    def copy(self) -> "ParamSet":
        return ParamSet(self._entries)  # constructor copies every array

    def zeros_like(self) -> "ParamSet":
        return ParamSet({k: np.zeros_like(v) for k, v in self._entries.items()})

    def fill(self, value: float) -> "ParamSet":
        return ParamSet({k: np.full_like(v, float(value)) for k, v in self._entries.items()})

    # -- flat vector round trip ----------------------------------------------

    def size(self) -> int:
        return sum(v.size for v in self._entries.values())

    def to_flat(self) -> np.ndarray:
        if not self._entries:
            return np.zeros(0, dtype=np.float64)
        return np.concatenate([v.ravel() for v in self._entries.values()])

    def from_flat(self, flat: np.ndarray) -> "ParamSet":
        """New ParamSet with this layout and values taken from ``flat``."""
        flat = np.asarray(flat, dtype=np.float64).ravel()
        if flat.size != self.size():
            raise ConfigError(f"flat vector has {flat.size} values, layout needs {self.size()}")
        out, offset = {}, 0
        for k, v in self._entries.items():
            out[k] = flat[offset : offset + v.size].reshape(v.shape).copy()
            offset += v.size
        return ParamSet(out)

    def check_finite(self, context: str = "ParamSet") -> None:
        for k, v in self._entries.items():
            if not np.all(np.isfinite(v)):
                raise NumericError(f"non-finite values in {context} entry '{k}'")


class Gradient(ParamSet):
    """ParamSet-shaped output of a backward pass, tagged with its loss value."""

    def __init__(self, entries: Dict[str, np.ndarray], loss: float):
        super().__init__(entries)
        self.loss = float(loss)

    @classmethod
    def from_paramset(cls, ps: ParamSet, loss: float) -> "Gradient":
        return cls(dict(ps.items()), loss)


def axpy_update(theta: ParamSet, g: ParamSet, step: Union[float, ParamSet]) -> ParamSet:
    """theta' = theta - step * g, with a scalar step or a per-parameter ParamSet."""
    if isinstance(step, ParamSet):
        return theta.sub(g.mul(step))
    return theta.sub(g.scale(float(step)))
