"""Flat parameter vectors with named segments, deterministic counter-based
RNG streams, a matrix-free conjugate-gradient solver, and central-difference
utilities used throughout the engine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import (
    IndefiniteCurvature,
    LayoutMismatch,
    MissingSegment,
    NonFiniteValue,
)

__all__ = [
    "Segment",
    "Layout",
    "ParamVector",
    "RngStream",
    "CgSolve",
    "conjugate_gradient",
    "fd_gradient",
    "fd_hvp",
]


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    length: int


class Layout:
    """Ordered, contiguous, non-overlapping named segments of a flat vector.

    Built from (name, length) pairs; offsets are derived from the order, so
    contiguity and full coverage hold by construction.
    """

    __slots__ = ("_segments", "_by_name", "dim")

    def __init__(self, sizes: Sequence[tuple[str, int]]):
        if not sizes:
            raise ValueError("layout needs at least one segment")
        segments = []
        by_name = {}
        offset = 0
        for name, length in sizes:
            length = int(length)
            if not name:
                raise ValueError("segment names must be non-empty")
            if name in by_name:
                raise ValueError(f"duplicate segment name {name!r}")
            if length < 1:
                raise ValueError(f"segment {name!r} has non-positive length {length}")
            seg = Segment(str(name), offset, length)
            segments.append(seg)
            by_name[seg.name] = seg
            offset += length
        self._segments = tuple(segments)
        self._by_name = by_name
        self.dim = offset

    @property
    def segments(self) -> tuple[Segment, ...]:
        return self._segments

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self._segments)

    def has(self, name: str) -> bool:
        return name in self._by_name

    def slice_of(self, name: str) -> slice:
        try:
            seg = self._by_name[name]
        except KeyError:
            raise MissingSegment(
                f"segment {name!r} not in layout {self.names}"
            ) from None
        return slice(seg.offset, seg.offset + seg.length)

    def length_of(self, name: str) -> int:
        return self._by_name[name].length if name in self._by_name else 0

    def extended(self, name: str, length: int) -> "Layout":
        """A new layout with one more segment appended at the end."""
        return Layout([(s.name, s.length) for s in self._segments] + [(name, length)])

    def __eq__(self, other) -> bool:
        return isinstance(other, Layout) and self._segments == other._segments

    def __hash__(self) -> int:
        return hash(self._segments)

    def __repr__(self) -> str:
        inner = ", ".join(f"{s.name}:{s.length}" for s in self._segments)
        return f"Layout({inner})"


class ParamVector:
    """Immutable float64 vector carrying a segment layout.

    Arithmetic is only defined between vectors with identical layouts;
    anything else raises LayoutMismatch.
    """

    __slots__ = ("layout", "values")

    def __init__(self, layout: Layout, values, *, copy: bool = True):
        arr = np.asarray(values, dtype=np.float64)
        if arr.shape != (layout.dim,):
            raise LayoutMismatch(
                f"value shape {arr.shape} does not match layout dim {layout.dim}"
            )
        if copy or arr.flags.writeable:
            arr = arr.copy()
        arr.setflags(write=False)
        self.layout = layout
        self.values = arr

    @classmethod
    def zeros(cls, layout: Layout) -> "ParamVector":
        return cls(layout, np.zeros(layout.dim), copy=False)

    def like(self, values) -> "ParamVector":
        """Wrap a raw array in this vector's layout."""
        return ParamVector(self.layout, values)

    def segment(self, name: str) -> np.ndarray:
        return self.values[self.layout.slice_of(name)]

    def with_segment(self, name: str, values) -> "ParamVector":
        sl = self.layout.slice_of(name)
        arr = np.asarray(values, dtype=np.float64)
        if arr.shape != (sl.stop - sl.start,):
            raise LayoutMismatch(
                f"segment {name!r} expects length {sl.stop - sl.start}, got {arr.shape}"
            )
        out = self.values.copy()
        out[sl] = arr
        return ParamVector(self.layout, out, copy=False)

    def add_to_segment(self, name: str, values) -> "ParamVector":
        sl = self.layout.slice_of(name)
        out = self.values.copy()
        out[sl] += np.asarray(values, dtype=np.float64)
        return ParamVector(self.layout, out, copy=False)

    def _check_same_layout(self, other: "ParamVector"):
        if self.layout != other.layout:
            raise LayoutMismatch(
                f"layouts differ: {self.layout} vs {other.layout}"
            )

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self._check_same_layout(other)
        return ParamVector(self.layout, self.values + other.values, copy=False)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self._check_same_layout(other)
        return ParamVector(self.layout, self.values - other.values, copy=False)

    def __mul__(self, scalar: float) -> "ParamVector":
        return ParamVector(self.layout, self.values * float(scalar), copy=False)

    __rmul__ = __mul__

    def __neg__(self) -> "ParamVector":
        return ParamVector(self.layout, -self.values, copy=False)

    def dot(self, other: "ParamVector") -> float:
        self._check_same_layout(other)
        return float(self.values @ other.values)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def inf_norm(self) -> float:
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ParamVector)
            and self.layout == other.layout
            and np.array_equal(self.values, other.values)
        )

    def __hash__(self):
        return hash((self.layout, self.values.tobytes()))

    def __repr__(self) -> str:
        return f"ParamVector({self.layout}, {self.values!r})"


_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64(z: int) -> int:
    z = (z + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


@dataclass(frozen=True)
class RngStream:
    """Handle for a counter-based random stream.

    The same (seed, stream_id) pair always yields the same draw sequence;
    distinct stream ids are independent. `child` derives sub-streams
    deterministically, so per-task randomness never depends on evaluation
    order.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        key = np.array(
            [self.seed & _MASK64, self.stream_id & _MASK64], dtype=np.uint64
        )
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, index: int) -> "RngStream":
        mixed = _splitmix64(((self.stream_id & _MASK64) * _GOLDEN + index + 1) & _MASK64)
        return RngStream(self.seed, mixed)


class CgSolve(NamedTuple):
    q: ParamVector
    iters: int
    residual: float
    converged: bool


def conjugate_gradient(
    apply: Callable[[ParamVector], ParamVector],
    b: ParamVector,
    tol: float = 1e-10,
    max_iter: int | None = None,
) -> CgSolve:
    """Solve apply(q) = b for a symmetric positive-definite linear map.

    Stops when the true residual satisfies ||apply(q) - b|| <= tol * max(1, ||b||),
    or returns the iterate at max_iter with its residual. The recursive
    residual is restarted from scratch whenever <r, r> grows by 10x, which
    guards against drift on ill-scaled maps.

    Raises NonFiniteValue if any inner product turns NaN/Inf and
    IndefiniteCurvature when a search direction has <p, Ap> <= 0.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if max_iter is None:
        max_iter = 10 * b.layout.dim
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")

    bound = tol * max(1.0, b.norm())
    q = ParamVector.zeros(b.layout)
    r = b
    if r.norm() <= bound:
        return CgSolve(q, 0, r.norm(), True)

    p = r
    rs = r.dot(r)
    iters = 0
    while iters < max_iter:
        ap = apply(p)
        if ap.layout != b.layout:
            raise LayoutMismatch("linear-map output layout differs from b")
        pap = p.dot(ap)
        if not math.isfinite(pap) or not math.isfinite(rs):
            raise NonFiniteValue("non-finite inner product in CG")
        if pap <= 0.0:
            raise IndefiniteCurvature(
                f"<p, Ap> = {pap:.3e} <= 0: map is not positive definite"
            )
        alpha = rs / pap
        q = q + alpha * p
        r = r - alpha * ap
        iters += 1

        rs_new = r.dot(r)
        if not math.isfinite(rs_new):
            raise NonFiniteValue("non-finite residual in CG")
        if math.sqrt(rs_new) <= bound:
            true_r = b - apply(q)
            true_norm = true_r.norm()
            if true_norm <= bound:
                return CgSolve(q, iters, true_norm, True)
            # recursive residual was optimistic: restart from the true one
            r = true_r
            p = r
            rs = r.dot(r)
            continue
        if rs_new > 10.0 * rs:
            r = b - apply(q)
            p = r
            rs = r.dot(r)
            continue
        p = r + (rs_new / rs) * p
        rs = rs_new

    residual = (b - apply(q)).norm()
    return CgSolve(q, iters, residual, residual <= bound)


def fd_gradient(
    h: Callable[[ParamVector], float], p: ParamVector, eps: float = 1e-5
) -> ParamVector:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = p.values
    out = np.empty(p.layout.dim)
    for k in range(p.layout.dim):
        work = base.copy()
        work[k] = base[k] + eps
        hp = float(h(ParamVector(p.layout, work, copy=False)))
        work = base.copy()
        work[k] = base[k] - eps
        hm = float(h(ParamVector(p.layout, work, copy=False)))
        if not (math.isfinite(hp) and math.isfinite(hm)):
            raise NonFiniteValue(f"fd_gradient: non-finite evaluation at coordinate {k}")
        out[k] = (hp - hm) / (2.0 * eps)
    return ParamVector(p.layout, out, copy=False)


def fd_hvp(
    g: Callable[[ParamVector], ParamVector],
    p: ParamVector,
    v: ParamVector,
    eps: float | None = None,
) -> ParamVector:
    """Hessian-vector product by central differences of a gradient oracle.

    Default step balances truncation against round-off at double precision:
    eps = 1e-4 * (1 + ||p||_inf) / (1 + ||v||_inf).
    """
    if p.layout != v.layout:
        raise LayoutMismatch("p and v layouts differ in fd_hvp")
    if eps is None:
        eps = 1e-4 * (1.0 + p.inf_norm()) / (1.0 + v.inf_norm())
    if eps <= 0:
        raise ValueError("eps must be positive")
    gp = g(p + eps * v)
    gm = g(p - eps * v)
    out = (1.0 / (2.0 * eps)) * (gp - gm)
    if not out.is_finite():
        raise NonFiniteValue("fd_hvp: non-finite gradient evaluation")
    return out
