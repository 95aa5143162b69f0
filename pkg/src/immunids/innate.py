"""Innate layer: self/non-self pattern matching of traffic sequences with DTW.

Each detector watches one characteristic and owns a :class:`PatternSet`. A
sequence is scored by its symmetric DTW distance to the nearest self and the
nearest non-self template.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, ParseError, PatternConflictError, ValidationError
from .traffic import Characteristic, LabeledDataset, TrafficSequence, extract_sequence, sort_records

log = logging.getLogger(__name__)

SELF = "self"
NONSELF = "nonself"
PATTERN_ORIGINS = ("external_feed", "training", "detection_feedback", "sync")


def _round9(value: float) -> float:
    return float(f"{value:.9g}")


def _check_values(values: Sequence[float], what: str) -> list[float]:
    out = [float(v) for v in values]
    if not out:
        raise ValidationError(f"{what} must be non-empty")
    if not all(math.isfinite(v) for v in out):
        raise ValidationError(f"{what} contains non-finite values")
    return out


# --------------------------------------------------------------------------
# Dynamic time warping
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DtwResult:
    distance: float
    path_cost: float
    normalizer: int


def dtw_distance(a: Sequence[float], b: Sequence[float]) -> DtwResult:
    """Symmetric DTW between two scalar sequences.

    g(1,1) = 2 d(1,1); interior cells take the cheapest of a horizontal or
    vertical step (weight 1) or a diagonal step (weight 2). The first row and
    column can only be reached along the border. The distance is the final
    cell divided by ``len(a) + len(b)``.
    """
    a = _check_values(a, "sequence a")
    b = _check_values(b, "sequence b")
    n, m = len(a), len(b)
    prev = [0.0] * m
    for i in range(n):
        row = [0.0] * m
        ai = a[i]
        for j in range(m):
            d = abs(ai - b[j])
            if i == 0 and j == 0:
                row[j] = 2 * d
            elif i == 0:
                row[j] = row[j - 1] + d
            elif j == 0:
                row[j] = prev[j] + d
            else:
                row[j] = min(row[j - 1] + d, prev[j - 1] + 2 * d, prev[j] + d)
        prev = row
    cost = prev[-1]
    return DtwResult(cost / (n + m), cost, n + m)


def dtw_cost_batch(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Path costs g(n, m) for K pairs at once.

    ``a`` is (K, n) or (n,) (broadcast against every row of ``b``), ``b`` is (K, m).
    Same recurrence and operation order as :func:`dtw_distance`.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if b.ndim != 2:
        raise ValidationError("b must be 2-D")
    if a.ndim == 1:
        a = np.broadcast_to(a, (b.shape[0], a.shape[0]))
    k, n = a.shape
    m = b.shape[1]
    if n == 0 or m == 0:
        raise ValidationError("sequences must be non-empty")
    prev = np.zeros((m, k))
    for i in range(n):
        row = np.empty((m, k))
        ai = a[:, i]
        for j in range(m):
            d = np.abs(ai - b[:, j])
            if i == 0 and j == 0:
                row[j] = 2 * d
            elif i == 0:
                row[j] = row[j - 1] + d
            elif j == 0:
                row[j] = prev[j] + d
            else:
                row[j] = np.minimum(np.minimum(row[j - 1] + d, prev[j - 1] + 2 * d), prev[j] + d)
        prev = row
    return prev[m - 1].copy()


# --------------------------------------------------------------------------
# Patterns
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Pattern:
    id: str
    label: str
    sequence: tuple[float, ...]
    characteristic: str
    origin: str = "external_feed"
    revision: int = 0

    def __post_init__(self):
        if self.label not in (SELF, NONSELF):
            raise ValidationError(f"pattern label must be self or nonself, got {self.label!r}")
        if self.origin not in PATTERN_ORIGINS:
            raise ValidationError(f"unknown pattern origin {self.origin!r}")
        if not self.id or any(ch.isspace() for ch in self.id):
            raise ValidationError(f"invalid pattern id {self.id!r}")
        values = _check_values(self.sequence, "pattern sequence")
        # stored at the precision used by the text format
        object.__setattr__(self, "sequence", tuple(_round9(v) for v in values))

    def to_text(self) -> str:
        values = ",".join(f"{v:.9g}" for v in self.sequence)
        return f"{self.characteristic} {self.label} {values} {self.origin} {self.id} {self.revision}"

    @classmethod
    def from_text(cls, line: str, line_no: int | None = None) -> "Pattern":
        parts = line.split()
        if len(parts) != 6:
            raise ParseError(f"bad pattern line {line!r}", line_no)
        char, label, values, origin, pid, revision = parts
        try:
            seq = tuple(float(v) for v in values.split(","))
            return cls(pid, label, seq, char, origin, int(revision))
        except ValueError as exc:
            raise ParseError(str(exc), line_no) from None


@dataclass(frozen=True)
class AddResult:
    added: bool
    pattern: Pattern  # the stored pattern (the pre-existing one on a skip)


class PatternSet:
    def __init__(self, characteristic: str, patterns: Iterable[Pattern] = ()):
        self.characteristic = characteristic
        self.patterns: list[Pattern] = []
        self._by_sequence: dict[tuple[float, ...], Pattern] = {}
        self._ids: set[str] = set()
        self._cache = None
        for p in patterns:
            add_pattern(self, p)

    def __len__(self):
        return len(self.patterns)

    def __iter__(self):
        return iter(self.patterns)

    def __eq__(self, other):
        return (isinstance(other, PatternSet) and self.characteristic == other.characteristic
                and self.patterns == other.patterns)

    def count(self, label: str) -> int:
        return sum(1 for p in self.patterns if p.label == label)

    def find(self, sequence: Sequence[float]) -> Pattern | None:
        return self._by_sequence.get(tuple(_round9(float(v)) for v in sequence))

    def get(self, pattern_id: str) -> Pattern | None:
        for p in self.patterns:
            if p.id == pattern_id:
                return p
        return None

    def fresh_id(self, prefix: str = "") -> str:
        n = len(self.patterns)
        while True:
            pid = f"{prefix}{self.characteristic}-{n:05d}"
            if pid not in self._ids:
                return pid
            n += 1

    def since(self, revision: int, exclude_origins: Iterable[str] = ()) -> list[Pattern]:
        exclude = set(exclude_origins)
        return [p for p in self.patterns if p.revision > revision and p.origin not in exclude]

    def grouped(self):
        """(label, length) -> (sorted pattern ids, stacked sequences); cached until the set changes."""
        if self._cache is None:
            groups: dict[tuple[str, int], list[Pattern]] = {}
            for p in sorted(self.patterns, key=lambda q: q.id):
                groups.setdefault((p.label, len(p.sequence)), []).append(p)
            self._cache = {key: ([p.id for p in ps], np.array([p.sequence for p in ps], dtype=float))
                           for key, ps in groups.items()}
        return self._cache

    def _insert(self, p: Pattern):
        self.patterns.append(p)
        self._by_sequence[p.sequence] = p
        self._ids.add(p.id)
        self._cache = None


def add_pattern(pats: PatternSet, p: Pattern) -> AddResult:
    """Append ``p`` unless the same sequence is already present.

    Raises :class:`PatternConflictError` when the sequence exists with the
    opposite label.
    """
    if p.characteristic != pats.characteristic:
        raise ValidationError(
            f"pattern characteristic {p.characteristic!r} does not match set {pats.characteristic!r}")
    existing = pats._by_sequence.get(p.sequence)
    if existing is not None:
        if existing.label != p.label:
            raise PatternConflictError(
                f"sequence already stored as {existing.label} pattern {existing.id}, refusing {p.label}")
        return AddResult(False, existing)
    if p.id in pats._ids:
        raise ValidationError(f"duplicate pattern id {p.id!r}")
    pats._insert(p)
    return AddResult(True, p)


# --------------------------------------------------------------------------
# Classification
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class InnateVerdict:
    probability: float
    nearest_self: tuple[str, float]
    nearest_nonself: tuple[str, float]
    characteristic: str


def distance_probability(d_self: float, d_nonself: float) -> float:
    """Map nearest distances to an intrusion probability D_s / (D_s + D_n)."""
    total = d_self + d_nonself
    if total == 0:
        return 0.5
    return d_self / total


def _nearest(values: np.ndarray, pats: PatternSet, label: str) -> tuple[str, float] | None:
    best = None
    n = values.shape[0]
    for (lab, length), (ids, matrix) in sorted(pats.grouped().items()):
        if lab != label:
            continue
        dist = dtw_cost_batch(values, matrix) / (n + length)
        k = int(np.argmin(dist))
        cand = (ids[k], float(dist[k]))
        if best is None or cand[1] < best[1] or (cand[1] == best[1] and cand[0] < best[0]):
            best = cand
    return best


def classify_sequence(seq: TrafficSequence, pats: PatternSet) -> InnateVerdict:
    if seq.characteristic != pats.characteristic:
        raise ValidationError(
            f"sequence characteristic {seq.characteristic!r} does not match detector {pats.characteristic!r}")
    values = np.array(_check_values(seq.values, "sequence"))
    near_self = _nearest(values, pats, SELF)
    near_non = _nearest(values, pats, NONSELF)
    if near_self is None or near_non is None:
        raise ConfigurationError(
            f"detector {pats.characteristic!r} needs at least one self and one nonself pattern")
    p = distance_probability(near_self[1], near_non[1])
    return InnateVerdict(p, near_self, near_non, pats.characteristic)


def is_active(pats: PatternSet) -> bool:
    return pats.count(SELF) > 0 and pats.count(NONSELF) > 0


# --------------------------------------------------------------------------
# Learning from labeled traffic
# --------------------------------------------------------------------------

def class_runs(data: LabeledDataset) -> list[tuple[str, list]]:
    """Maximal time-ordered runs of normal or attack records (unlabeled records break runs)."""
    runs: list[tuple[str, list]] = []
    current, kind = [], None
    for r in sort_records(data.records):
        k = SELF if r.label.is_normal else NONSELF if r.label.is_attack else None
        if k != kind:
            if current and kind is not None:
                runs.append((kind, current))
            current, kind = [], k
        current.append(r)
    if current and kind is not None:
        runs.append((kind, current))
    return runs


def run_segments(records: Sequence, c: Characteristic, window: float, segment_len: int) -> list[tuple[float, ...]]:
    """Non-overlapping segments of ``segment_len`` windows; a trailing remainder is dropped."""
    values = extract_sequence(records, c, window).values
    return [tuple(values[i:i + segment_len])
            for i in range(0, len(values) - segment_len + 1, segment_len)]


def learn_patterns_from_training(data: LabeledDataset, c: Characteristic, window: float,
                                 segment_len: int, id_prefix: str = "", revision: int = 0,
                                 origin: str = "training") -> list[Pattern]:
    """Self patterns from normal runs, nonself patterns from attack runs.

    A segment produced by both classes carries no evidence either way and is
    dropped from both (the count is logged).
    """
    if segment_len < 2:
        raise ValidationError("segment_len must be at least 2")
    labels = {r.label.kind for r in data.records}
    if not {"normal", "attack"} <= labels:
        raise ValidationError("pattern learning needs both normal and attack records")

    seen: dict[str, dict[tuple[float, ...], None]] = {SELF: {}, NONSELF: {}}
    for kind, run in class_runs(data):
        for seg in run_segments(run, c, window, segment_len):
            seen[kind].setdefault(tuple(_round9(v) for v in seg), None)
    ambiguous = seen[SELF].keys() & seen[NONSELF].keys()
    if ambiguous:
        log.info("%s: dropped %d segments seen in both classes", c.id, len(ambiguous))

    patterns = []
    for kind in (SELF, NONSELF):
        for seg in seen[kind]:
            if seg in ambiguous:
                continue
            pid = f"{id_prefix}{c.id}-{len(patterns):05d}"
            patterns.append(Pattern(pid, kind, seg, c.id, origin, revision))
    return patterns
