from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class ParameterVector:
    """Flat float64 parameter array plus the tensor layout it encodes.

    ``layout`` is a list of ``(name, dims)`` pairs; segment ``i`` of
    ``values`` holds tensor ``i`` in C order.
    """

    values: np.ndarray
    layout: list[tuple[str, tuple[int, ...]]] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError(f"parameter values must be 1-D, got shape {self.values.shape}")
        if not self.layout:
            self.layout = [("theta", (self.values.size,))]
        self.layout = [(name, tuple(int(d) for d in dims)) for name, dims in self.layout]
        total = sum(int(np.prod(dims)) for _, dims in self.layout)
        if total != self.values.size:
            raise ValueError(f"layout describes {total} entries but values has {self.values.size}")

    def __len__(self) -> int:
        return self.values.size

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def offsets(self) -> dict[str, tuple[int, tuple[int, ...]]]:
        """Start offset and dims of each named segment."""
        out, start = {}, 0
        for name, dims in self.layout:
            out[name] = (start, dims)
            start += int(np.prod(dims))
        return out

    def tensor(self, name: str) -> np.ndarray:
        start, dims = self.offsets()[name]
        return self.values[start : start + int(np.prod(dims))].reshape(dims)

    def with_values(self, values) -> "ParameterVector":
        return ParameterVector(np.array(values, dtype=np.float64), list(self.layout))

    def copy(self) -> "ParameterVector":
        return self.with_values(self.values.copy())

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.values).all())


def as_array(params) -> np.ndarray:
    """Raw float64 array from a ParameterVector or array-like."""
    if isinstance(params, ParameterVector):
        return params.values
    return np.asarray(params, dtype=np.float64)
