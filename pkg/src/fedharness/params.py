"""Flat parameter vectors exchanged between the server and its clients.

Wire encoding (all integers big-endian)::

    u16   layout_id length L
    L     layout_id, UTF-8
    u32   element count n
    8*n   elements, IEEE-754 binary64 big-endian
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

_LAYOUT_LEN = struct.Struct(">H")
_COUNT = struct.Struct(">I")


class ParamError(ValueError):
    """Base class for parameter vector errors."""


class EmptyInputError(ParamError):
    pass


class LayoutMismatchError(ParamError):
    pass


class ZeroWeightError(ParamError):
    pass


class NonFiniteError(ParamError):
    pass


class DecodeError(ParamError):
    pass


@dataclass(frozen=True, eq=False)
class ParamVector:
    values: np.ndarray
    layout_id: str

    def __post_init__(self) -> None:
        values = np.ascontiguousarray(self.values, dtype=np.float64).reshape(-1)
        if values.size == 0:
            raise EmptyInputError("parameter vector must be nonempty")
        if not np.all(np.isfinite(values)):
            raise NonFiniteError(f"non-finite values in parameters of layout {self.layout_id!r}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return int(self.values.size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return (
            self.layout_id == other.layout_id
            and self.values.shape == other.values.shape
            and bool(np.array_equal(self.values, other.values))
        )

    def __hash__(self) -> int:
        return hash((self.layout_id, self.values.tobytes()))

    def compatible(self, other: ParamVector) -> bool:
        return self.layout_id == other.layout_id and len(self) == len(other)

    def replace(self, values: np.ndarray) -> ParamVector:
        return ParamVector(values, self.layout_id)


def check_compatible(vectors: Iterable[ParamVector]) -> None:
    first = None
    for p in vectors:
        if first is None:
            first = p
        elif not first.compatible(p):
            raise LayoutMismatchError(
                f"cannot combine {first.layout_id!r}[{len(first)}] with {p.layout_id!r}[{len(p)}]"
            )


def serialize(p: ParamVector) -> bytes:
    layout = p.layout_id.encode("utf-8")
    return b"".join(
        (
            _LAYOUT_LEN.pack(len(layout)),
            layout,
            _COUNT.pack(len(p)),
            p.values.astype(">f8").tobytes(),
        )
    )


def deserialize_from(buf: bytes | memoryview, offset: int = 0) -> tuple[ParamVector, int]:
    """Decode one vector starting at ``offset``; return it and the offset just past it."""
    view = memoryview(buf)
    try:
        (n_layout,) = _LAYOUT_LEN.unpack_from(view, offset)
        offset += _LAYOUT_LEN.size
        if offset + n_layout > len(view):
            raise DecodeError("truncated layout id")
        layout = bytes(view[offset : offset + n_layout]).decode("utf-8")
        offset += n_layout
        (count,) = _COUNT.unpack_from(view, offset)
        offset += _COUNT.size
    except struct.error as exc:
        raise DecodeError(f"truncated parameter header: {exc}") from None
    end = offset + 8 * count
    if end > len(view):
        raise DecodeError(f"expected {count} elements, buffer too short")
    values = np.frombuffer(view[offset:end], dtype=">f8").astype(np.float64)
    return ParamVector(values, layout), end


def deserialize(buf: bytes) -> ParamVector:
    p, end = deserialize_from(buf)
    if end != len(buf):
        raise DecodeError(f"{len(buf) - end} trailing bytes after parameter vector")
    return p


def weighted_mean(items: Sequence[tuple[ParamVector, float]]) -> ParamVector:
    """Element-wise ``sum(w_i * p_i) / sum(w_i)``."""
    if len(items) == 0:
        raise EmptyInputError("weighted_mean of an empty list")
    check_compatible(p for p, _ in items)
    weights = np.asarray([w for _, w in items], dtype=np.float64)
    if np.any(weights < 0):
        raise ParamError("weights must be nonnegative")
    total = weights.sum()
    if total <= 0:
        raise ZeroWeightError("total weight is zero")
    stacked = np.stack([p.values for p, _ in items])
    mean = (weights / total) @ stacked
    return items[0][0].replace(mean)
