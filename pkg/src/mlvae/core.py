"""Domain types and conversions between boundary sequences, segments and frame labels.

Frames are 0-based and every segment is a half-open interval ``[start, end)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np


class ValidationError(ValueError):
    """Raised when an input violates a documented invariant."""


class InfeasibleError(ValueError):
    """Raised when no segmentation exists (fewer frames than phonemes)."""


class Segment(NamedTuple):
    phoneme: int
    mismatch: bool
    start: int
    end: int


def _as_bool_vector(b) -> np.ndarray:
    arr = np.asarray(b)
    if arr.ndim != 1:
        raise ValidationError(f"boundary sequence must be 1-d, got shape {arr.shape}")
    if arr.dtype != bool:
        if not np.all((arr == 0) | (arr == 1)):
            raise ValidationError("boundary sequence must contain only 0/1 values")
        arr = arr.astype(bool)
    return arr


def validate_boundaries(b, num_segments: Optional[int] = None) -> np.ndarray:
    """Return ``b`` as a bool array after checking the BoundarySeq invariants."""
    arr = _as_bool_vector(b)
    if arr.size == 0:
        raise ValidationError("boundary sequence is empty")
    if not arr[0]:
        raise ValidationError("first frame must start a segment (b[0] must be 1)")
    if num_segments is not None and int(arr.sum()) != num_segments:
        raise ValidationError(
            f"boundary sequence marks {int(arr.sum())} segments, expected {num_segments}")
    return arr


def boundaries_to_segments(b) -> list[tuple[int, int]]:
    """Split ``[0, T)`` into the half-open segments started by ``b``.

    >>> boundaries_to_segments([1, 0, 1, 0])
    [(0, 2), (2, 4)]
    """
    arr = validate_boundaries(b)
    starts = np.flatnonzero(arr)
    ends = np.append(starts[1:], arr.size)
    return [(int(s), int(e)) for s, e in zip(starts, ends)]


def segments_to_boundaries(segments: Sequence[tuple[int, int]], num_frames: Optional[int] = None) -> np.ndarray:
    if len(segments) == 0:
        raise ValidationError("no segments given")
    T = segments[-1][1] if num_frames is None else num_frames
    b = np.zeros(T, dtype=bool)
    expected = 0
    for start, end in segments:
        if start != expected or end <= start:
            raise ValidationError(f"segments do not tile [0, {T}) contiguously at {(start, end)}")
        b[start] = True
        expected = end
    if expected != T:
        raise ValidationError(f"segments end at {expected}, expected {T}")
    return b


def starts_to_boundaries(starts: Sequence[int], num_frames: int) -> np.ndarray:
    b = np.zeros(num_frames, dtype=bool)
    b[np.asarray(starts, dtype=int)] = True
    return validate_boundaries(b, len(starts))


def segment_index(b) -> np.ndarray:
    """Per-frame index of the segment each frame belongs to."""
    arr = validate_boundaries(b)
    return np.cumsum(arr) - 1


def expand_phonemes(C: Sequence[int], b) -> np.ndarray:
    """Repeat each phoneme of ``C`` over the frames of its segment."""
    C = np.asarray(C)
    arr = validate_boundaries(b)
    if int(arr.sum()) != C.size:
        raise ValidationError(f"{int(arr.sum())} segments for {C.size} phonemes")
    return C[segment_index(arr)]


def uniform_alignment(T: int, L: int) -> np.ndarray:
    """Flat-start segmentation: L segments with lengths differing by at most one.

    The ``T mod L`` leftover frames go to the earliest segments.
    """
    if L < 1:
        raise ValidationError("need at least one phoneme")
    if T < L:
        raise InfeasibleError(f"cannot place {L} segments in {T} frames")
    base, extra = divmod(T, L)
    lengths = np.full(L, base)
    lengths[:extra] += 1
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    b = np.zeros(T, dtype=bool)
    b[starts] = True
    return b


@dataclass(frozen=True)
class PhonemeInventory:
    """Phoneme symbols with the frame-level prior ``p(y)`` and generative prior ``zeta``."""

    symbols: tuple
    prior: np.ndarray
    zeta: np.ndarray

    def __post_init__(self):
        n = len(self.symbols)
        if n < 2:
            raise ValidationError("inventory needs at least two phonemes")
        for name in ("prior", "zeta"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if v.shape != (n,):
                raise ValidationError(f"{name} must have length {n}")
            if np.any(v <= 0) or abs(v.sum() - 1.0) > 1e-9:
                raise ValidationError(f"{name} must be strictly positive and sum to 1")
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    @property
    def size(self) -> int:
        return len(self.symbols)

    @classmethod
    def from_counts(cls, symbols, counts, smoothing: float = 1.0) -> "PhonemeInventory":
        counts = np.asarray(counts, dtype=np.float64) + smoothing
        p = counts / counts.sum()
        return cls(tuple(symbols), p, p.copy())

    @classmethod
    def uniform(cls, n: int) -> "PhonemeInventory":
        p = np.full(n, 1.0 / n)
        return cls(tuple(str(i) for i in range(n)), p, p.copy())


@dataclass(frozen=True)
class Truth:
    pronounced: np.ndarray
    boundaries: np.ndarray  # segment start frames
    mismatch: np.ndarray

    def segments(self, num_frames: int) -> list[tuple[int, int]]:
        ends = list(self.boundaries[1:]) + [num_frames]
        return [(int(s), int(e)) for s, e in zip(self.boundaries, ends)]


@dataclass(frozen=True)
class Utterance:
    id: str
    X: np.ndarray
    C: np.ndarray
    truth: Optional[Truth] = None

    def __post_init__(self):
        X = np.asarray(self.X)
        C = np.asarray(self.C, dtype=np.int64)
        if X.ndim != 2:
            raise ValidationError(f"{self.id}: features must be T x D, got shape {X.shape}")
        T, L = X.shape[0], C.size
        if L < 1 or T < L:
            raise ValidationError(f"{self.id}: need T >= L >= 1, got T={T}, L={L}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "C", C)
        if self.truth is not None:
            tr = self.truth
            pron = np.asarray(tr.pronounced, dtype=np.int64)
            starts = np.asarray(tr.boundaries, dtype=np.int64)
            mis = np.asarray(tr.mismatch, dtype=bool)
            if not (pron.size == starts.size == mis.size == L):
                raise ValidationError(f"{self.id}: truth arrays must have length L={L}")
            if starts[0] != 0 or np.any(np.diff(starts) <= 0) or starts[-1] >= T:
                raise ValidationError(f"{self.id}: truth boundaries must increase strictly from 0")
            if not np.array_equal(mis, pron != C):
                raise ValidationError(f"{self.id}: truth.mismatch disagrees with pronounced != C")
            object.__setattr__(self, "truth", Truth(pron, starts, mis))

    @property
    def num_frames(self) -> int:
        return self.X.shape[0]

    @property
    def num_phonemes(self) -> int:
        return self.C.size

    def truth_boundaries(self) -> np.ndarray:
        if self.truth is None:
            raise ValidationError(f"{self.id}: no ground truth attached")
        return starts_to_boundaries(self.truth.boundaries, self.num_frames)


@dataclass(frozen=True)
class LatentAssignment:
    """Hard E-step assignments: phonemes, boundaries and correctness per frame."""

    Y: np.ndarray
    B: np.ndarray
    Pi: np.ndarray

    def __post_init__(self):
        B = validate_boundaries(self.B)
        Pi = np.asarray(self.Pi, dtype=bool)
        if Pi.shape != B.shape or np.asarray(self.Y).shape != B.shape:
            raise ValidationError("latent sequences must all have length T")
        seg = segment_index(B)
        starts = np.flatnonzero(B)
        if not np.array_equal(Pi, Pi[starts][seg]):
            raise ValidationError("correctness must be constant within each segment")
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "Pi", Pi)


@dataclass(frozen=True)
class LocalizationResult:
    segments: tuple

    def __post_init__(self):
        segs = tuple(Segment(int(p), bool(m), int(s), int(e)) for p, m, s, e in self.segments)
        segments_to_boundaries([(s.start, s.end) for s in segs])
        object.__setattr__(self, "segments", segs)

    @classmethod
    def from_path(cls, C, b, mismatch) -> "LocalizationResult":
        spans = boundaries_to_segments(b)
        if len(spans) != len(C) or len(mismatch) != len(C):
            raise ValidationError("path does not match the phoneme sequence length")
        return cls(tuple((c, m, s, e) for c, m, (s, e) in zip(C, mismatch, spans)))

    @property
    def num_frames(self) -> int:
        return self.segments[-1].end

    @property
    def mismatch(self) -> np.ndarray:
        return np.array([s.mismatch for s in self.segments], dtype=bool)

    @property
    def spans(self) -> list[tuple[int, int]]:
        return [(s.start, s.end) for s in self.segments]

    @property
    def boundaries(self) -> np.ndarray:
        return segments_to_boundaries(self.spans)

    def frames(self, symbols: Optional[Sequence[str]] = None) -> list[str]:
        """Per-frame labels where mismatched phonemes carry a trailing ``*``."""
        out = []
        for seg in self.segments:
            name = str(seg.phoneme if symbols is None else symbols[seg.phoneme])
            out.extend([name + "*" if seg.mismatch else name] * (seg.end - seg.start))
        return out

    def to_dict(self) -> dict:
        return {"segments": [
            {"phoneme": s.phoneme, "mismatch": s.mismatch, "start": s.start, "end": s.end}
            for s in self.segments]}

    @classmethod
    def from_dict(cls, d: dict) -> "LocalizationResult":
        return cls(tuple((s["phoneme"], s["mismatch"], s["start"], s["end"]) for s in d["segments"]))


@dataclass(frozen=True)
class Priors:
    alpha: float = 1.0
    beta: float = 11.0
    gamma_pi: float = 0.15
    inventory: Optional[PhonemeInventory] = field(default=None, compare=False)

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValidationError("Beta prior parameters must be positive")
        if not 0.0 < self.gamma_pi < 1.0:
            raise ValidationError("gamma_pi must lie strictly between 0 and 1")

    @property
    def boundary_rate(self) -> float:
        return self.alpha / (self.alpha + self.beta)
