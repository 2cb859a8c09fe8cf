"""Derived value streams ("viewpoints") over event sequences.

Each viewpoint maps a sequence to a per-position value stream; positions
where the mapping is partial carry ``None``.  Temporal viewpoints (pitch,
interval, octave-invariant interval, contour, extended contour) depend
only on pitches; the metrical weight reads the meter and onset grid; the
anchored viewpoints relate the current pitch to a referent (estimated key
tonic or the first tones of the piece).

Key estimation is Krumhansl-Schmuckler: Pearson correlation of the
(optionally duration-weighted) pitch-class counts against major/minor
profiles rotated to all 12 tonics.  Profile numbers are configuration
data loaded from a text file, not hardcoded truth.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from fractions import Fraction
from importlib import resources
from pathlib import Path

from .corpus import EventSequence

MAJOR = "M"
MINOR = "m"

LARGE_INTERVAL = 5  # contour extension threshold, semitones


class ViewpointId(enum.Enum):
    """Closed set of implemented viewpoint types."""

    PITCH = "P"
    INTERVAL = "I"
    OCTAVE_INTERVAL = "O"
    CONTOUR = "C"
    EXTENDED_CONTOUR = "X"
    METRICAL_WEIGHT = "M"
    KEY = "K"
    TONIC = "T"
    FIRST1 = "F1"
    FIRST2 = "F2"
    FIRST3 = "F3"
    METRICAL_PITCH = "MP"
    METRICAL_KEY = "MK"
    METRICAL_TONIC = "MT"

    def __repr__(self):  # noqa: D105
        return f"ViewpointId.{self.name}"


# Viewpoints whose value is fixed by the candidate outcome at offset zero.
PREDICTIVE = frozenset(
    ViewpointId(t) for t in ("P", "I", "O", "C", "X", "K", "T", "F1", "F2", "F3",
                             "MP", "MK", "MT")
)
# Viewpoints only defined at offset zero (derived from the context, or
# anchored with zero temporal extent).
ZERO_OFFSET_ONLY = frozenset(
    ViewpointId(t) for t in ("M", "K", "T", "F1", "F2", "F3", "MP", "MK", "MT")
)
# Viewpoints that may appear at positive offsets and in expanding groups.
TEMPORAL = frozenset(ViewpointId(t) for t in ("P", "I", "O", "C", "X"))
# Viewpoints that need a key estimate.
KEYED = frozenset(ViewpointId(t) for t in ("K", "T", "MK", "MT"))

_FIRST_ANCHOR = {
    ViewpointId.FIRST1: 0,
    ViewpointId.FIRST2: 1,
    ViewpointId.FIRST3: 2,
}

# Canonical display order (used for sorting basis features in compounds).
TAG_ORDER = {vp: i for i, vp in enumerate(ViewpointId)}


@dataclass(frozen=True)
class KeyProfiles:
    """12 major and 12 minor profile weights."""

    major: tuple[float, ...]
    minor: tuple[float, ...]

    def __post_init__(self):
        if len(self.major) != 12 or len(self.minor) != 12:
            raise ValueError("key profiles must have 12 weights per mode")


def load_key_profiles(path: str | Path | None = None) -> KeyProfiles:
    """Load 24 whitespace-separated reals (12 major then 12 minor)."""
    if path is None:
        text = resources.files("melpulse").joinpath("data/key_profiles.txt").read_text()
    else:
        text = Path(path).read_text(encoding="utf-8")
    values = [float(tok) for tok in text.split()]
    if len(values) != 24:
        raise ValueError(f"expected 24 profile values, got {len(values)}")
    return KeyProfiles(tuple(values[:12]), tuple(values[12:]))


@dataclass(frozen=True)
class KeyEstimate:
    """Winning tonic pitch-class and mode with its profile correlation."""

    tonic: int
    mode: str
    correlation: float


def _pearson(x, y) -> float:
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    if sxx == 0 or syy == 0:
        return 0.0
    return sxy / math.sqrt(sxx * syy)


def find_key(
    seq: EventSequence, profiles: KeyProfiles, duration_weighted: bool = True
) -> KeyEstimate:
    """Pick the best of 24 (tonic, mode) candidates by profile correlation.

    Ties break toward the lowest tonic pitch-class, major before minor.
    A sequence with a single pitch class (or an exactly flat count vector)
    falls back to that pitch class, major, correlation zero.
    """
    counts = [0.0] * 12
    for ev in seq.events:
        counts[ev.pitch % 12] += float(ev.duration) if duration_weighted else 1.0

    distinct = {ev.pitch % 12 for ev in seq.events}
    flat = max(counts) == min(counts)
    if len(distinct) == 1 or flat:
        tonic = seq.events[0].pitch % 12
        return KeyEstimate(tonic, MAJOR, 0.0)

    best: KeyEstimate | None = None
    for tonic in range(12):
        for mode, profile in ((MAJOR, profiles.major), (MINOR, profiles.minor)):
            rotated = [profile[(pc - tonic) % 12] for pc in range(12)]
            corr = _pearson(counts, rotated)
            if best is None or corr > best.correlation:
                best = KeyEstimate(tonic, mode, corr)
    assert best is not None
    return best


def octave_invariant(interval: int) -> int:
    """Nonnegative residue of an interval modulo one octave."""
    return interval % 12


def contour(interval: int) -> int:
    return (interval > 0) - (interval < 0)


def extended_contour(interval: int) -> int:
    sign = contour(interval)
    return 2 * sign if abs(interval) > LARGE_INTERVAL else sign


def _grid_points_per_bar(numerator: int, max_levels: int = 64):
    """Yield grid sizes: 1, then numerator (or 2 for power-of-two meters),
    doubling from there."""
    points = 1
    yield points
    is_pow2 = numerator & (numerator - 1) == 0
    points = 2 if is_pow2 else numerator
    for _ in range(max_levels):
        yield points
        points *= 2


def _grid_spacings(seq: EventSequence) -> list[Fraction]:
    bar = seq.bar_length()
    shortest = min(ev.duration for ev in seq.events)
    spacings = []
    for points in _grid_points_per_bar(seq.time_signature[0]):
        spacing = bar / points
        if spacing < shortest and spacings:
            break
        spacings.append(spacing)
        if spacing <= shortest:
            break
    return spacings


def metrical_weights(seq: EventSequence) -> list[int]:
    """Count, per event, the nested bar-subdivision grids hitting its onset.

    Grids run from one point per bar down to a spacing no finer than the
    shortest duration in the piece; an onset on no grid still weighs 1.
    """
    bar = seq.bar_length()
    spacings = _grid_spacings(seq)
    weights = []
    for ev in seq.events:
        pos = (ev.onset - seq.anacrusis_offset) % bar
        hits = sum(1 for spacing in spacings if pos % spacing == 0)
        weights.append(max(1, hits))
    return weights


def max_metrical_weight(seq: EventSequence) -> int:
    return len(_grid_spacings(seq))


def key_degree(pitch: int, key: KeyEstimate) -> tuple[str, int]:
    return (key.mode, (pitch - key.tonic) % 12)


def tonic_degree(pitch: int, key: KeyEstimate) -> int:
    return (pitch - key.tonic) % 12


def anchor_interval(
    seq: EventSequence, vp: ViewpointId, key: KeyEstimate | None = None
) -> list:
    """Streams for the anchored viewpoints (key, tonic, first-in-piece)."""
    pitches = seq.pitches
    if vp is ViewpointId.KEY:
        if key is None:
            raise ValueError("key estimate required for K stream")
        return [key_degree(p, key) for p in pitches]
    if vp is ViewpointId.TONIC:
        if key is None:
            raise ValueError("key estimate required for T stream")
        return [tonic_degree(p, key) for p in pitches]
    if vp in _FIRST_ANCHOR:
        anchor = _FIRST_ANCHOR[vp]
        return [
            p - pitches[anchor] if t > anchor else None
            for t, p in enumerate(pitches)
        ]
    raise ValueError(f"{vp} is not an anchored viewpoint")


def derive(
    seq: EventSequence, vp: ViewpointId, key: KeyEstimate | None = None
) -> list:
    """Per-position viewpoint values; ``None`` where the mapping is partial.

    A key estimate must be supplied exactly for the key-anchored viewpoints
    (K, T, MK, MT).
    """
    if vp in KEYED and key is None:
        raise ValueError(f"key estimate required for {vp.value} stream")

    pitches = seq.pitches
    if vp is ViewpointId.PITCH:
        return list(pitches)
    if vp is ViewpointId.INTERVAL:
        return [None] + [pitches[t] - pitches[t - 1] for t in range(1, len(pitches))]
    if vp is ViewpointId.OCTAVE_INTERVAL:
        return [None] + [
            octave_invariant(pitches[t] - pitches[t - 1]) for t in range(1, len(pitches))
        ]
    if vp is ViewpointId.CONTOUR:
        return [None] + [contour(pitches[t] - pitches[t - 1]) for t in range(1, len(pitches))]
    if vp is ViewpointId.EXTENDED_CONTOUR:
        return [None] + [
            extended_contour(pitches[t] - pitches[t - 1]) for t in range(1, len(pitches))
        ]
    if vp is ViewpointId.METRICAL_WEIGHT:
        return metrical_weights(seq)
    if vp in (ViewpointId.KEY, ViewpointId.TONIC) or vp in _FIRST_ANCHOR:
        return anchor_interval(seq, vp, key)
    if vp is ViewpointId.METRICAL_PITCH:
        m = metrical_weights(seq)
        return [(w, p) for w, p in zip(m, pitches)]
    if vp is ViewpointId.METRICAL_KEY:
        m = metrical_weights(seq)
        inner = anchor_interval(seq, ViewpointId.KEY, key)
        return [(w, v) for w, v in zip(m, inner)]
    if vp is ViewpointId.METRICAL_TONIC:
        m = metrical_weights(seq)
        inner = anchor_interval(seq, ViewpointId.TONIC, key)
        return [(w, v) for w, v in zip(m, inner)]
    raise ValueError(f"unknown viewpoint {vp}")


def value_sort_key(vp: ViewpointId, value) -> tuple:
    """Total order over a viewpoint's values, for canonical feature order."""
    if vp is ViewpointId.KEY:
        mode, degree = value
        return (0 if mode == MAJOR else 1, degree)
    if vp in (ViewpointId.METRICAL_KEY,):
        weight, inner = value
        mode, degree = inner
        return (weight, 0 if mode == MAJOR else 1, degree)
    if vp in (ViewpointId.METRICAL_PITCH, ViewpointId.METRICAL_TONIC):
        weight, inner = value
        return (weight, inner)
    return (value,)


def value_to_text(vp: ViewpointId, value) -> str:
    """Serialize a viewpoint value for model files."""
    if vp is ViewpointId.KEY:
        mode, degree = value
        return f"{mode}{degree}"
    if vp in (ViewpointId.METRICAL_PITCH, ViewpointId.METRICAL_TONIC):
        weight, inner = value
        return f"{weight}|{inner}"
    if vp is ViewpointId.METRICAL_KEY:
        weight, (mode, degree) = value
        return f"{weight}|{mode}{degree}"
    return str(value)


def value_from_text(vp: ViewpointId, text: str):
    if vp is ViewpointId.KEY:
        return (text[0], int(text[1:]))
    if vp in (ViewpointId.METRICAL_PITCH, ViewpointId.METRICAL_TONIC):
        weight, inner = text.split("|")
        return (int(weight), int(inner))
    if vp is ViewpointId.METRICAL_KEY:
        weight, inner = text.split("|")
        return (int(weight), (inner[0], int(inner[1:])))
    return int(text)
