"""Event-sequence data model, corpus ingestion and cross-validation folds.

A corpus is a set of monophonic melodies in a line-delimited text format,
one sequence per line::

    <id> <ts-num>/<ts-den> <anacrusis-num>/<anacrusis-den> | p:on/od:dn/dd , ...

Pitches are integer MIDI values; onsets and durations are exact rationals
in quarter-note units so that metrical-grid membership stays exact.  The
outcome alphabet is dataset-global: the sorted set of pitches occurring
anywhere in the corpus.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path


class CorpusError(ValueError):
    """Raised for malformed corpus or fold files and invalid sequences."""


@dataclass(frozen=True)
class Event:
    """One note: MIDI pitch plus exact onset/duration in quarter units."""

    pitch: int
    onset: Fraction
    duration: Fraction

    def __post_init__(self):
        if not 0 <= self.pitch <= 127:
            raise CorpusError(f"pitch {self.pitch} outside MIDI range 0-127")
        if self.duration <= 0:
            raise CorpusError(f"duration must be > 0, got {self.duration}")


@dataclass(frozen=True)
class EventSequence:
    """An ordered monophonic melody with meter metadata."""

    id: str
    events: tuple[Event, ...]
    time_signature: tuple[int, int] = (4, 4)
    anacrusis_offset: Fraction = Fraction(0)

    def __post_init__(self):
        if not self.events:
            raise CorpusError(f"sequence {self.id!r} is empty")
        num, den = self.time_signature
        if num < 1 or den < 1:
            raise CorpusError(f"sequence {self.id!r}: bad time signature {num}/{den}")
        if self.anacrusis_offset < 0:
            raise CorpusError(f"sequence {self.id!r}: negative anacrusis")
        last = None
        for ev in self.events:
            if last is not None and ev.onset <= last:
                raise CorpusError(
                    f"sequence {self.id!r}: onsets not strictly increasing at {ev.onset}"
                )
            last = ev.onset

    def __len__(self) -> int:
        return len(self.events)

    @property
    def pitches(self) -> tuple[int, ...]:
        return tuple(ev.pitch for ev in self.events)

    def bar_length(self) -> Fraction:
        """Bar length in quarter-note units."""
        num, den = self.time_signature
        return Fraction(4 * num, den)


@dataclass(frozen=True)
class Corpus:
    """Immutable sequence collection with its dataset-global pitch alphabet."""

    sequences: tuple[EventSequence, ...]
    alphabet: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if not self.alphabet:
            object.__setattr__(self, "alphabet", derive_alphabet(self.sequences))
        ids = [s.id for s in self.sequences]
        if len(set(ids)) != len(ids):
            raise CorpusError("duplicate sequence ids in corpus")

    def __len__(self) -> int:
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)

    @property
    def n_events(self) -> int:
        return sum(len(s) for s in self.sequences)

    def by_id(self, seq_id: str) -> EventSequence:
        for seq in self.sequences:
            if seq.id == seq_id:
                return seq
        raise KeyError(seq_id)

    def content_hash(self) -> str:
        """sha256 of the serialized corpus, for model provenance."""
        return hashlib.sha256(serialize(self).encode("utf-8")).hexdigest()


def derive_alphabet(sequences) -> tuple[int, ...]:
    pitches = set()
    for seq in sequences:
        pitches.update(seq.pitches)
    return tuple(sorted(pitches))


def _parse_fraction(text: str, where: str) -> Fraction:
    try:
        if "/" in text:
            num, den = text.split("/")
            return Fraction(int(num), int(den))
        return Fraction(int(text))
    except (ValueError, ZeroDivisionError) as exc:
        raise CorpusError(f"{where}: bad rational {text!r}") from exc


def _parse_line(line: str, lineno: int) -> EventSequence:
    where = f"line {lineno}"
    if "|" not in line:
        raise CorpusError(f"{where}: missing '|' separator")
    head, _, body = line.partition("|")
    parts = head.split()
    if len(parts) != 3:
        raise CorpusError(f"{where}: expected '<id> <ts> <anacrusis>' before '|'")
    seq_id, ts_text, ana_text = parts
    if "/" not in ts_text:
        raise CorpusError(f"{where}: time signature must be num/den")
    try:
        ts_num, ts_den = (int(x) for x in ts_text.split("/"))
    except ValueError as exc:
        raise CorpusError(f"{where}: bad time signature {ts_text!r}") from exc
    anacrusis = _parse_fraction(ana_text, where)

    events = []
    for chunk in body.split(","):
        chunk = chunk.strip()
        if not chunk:
            raise CorpusError(f"{where}: empty event field")
        fields = chunk.split(":")
        if len(fields) != 3:
            raise CorpusError(f"{where}: event must be pitch:onset:duration, got {chunk!r}")
        try:
            pitch = int(fields[0])
        except ValueError as exc:
            raise CorpusError(f"{where}: bad pitch {fields[0]!r}") from exc
        onset = _parse_fraction(fields[1], where)
        duration = _parse_fraction(fields[2], where)
        try:
            events.append(Event(pitch, onset, duration))
        except CorpusError as exc:
            raise CorpusError(f"{where}: {exc}") from exc
    try:
        return EventSequence(seq_id, tuple(events), (ts_num, ts_den), anacrusis)
    except CorpusError as exc:
        raise CorpusError(f"{where}: {exc}") from exc


def ingest(path: str | Path) -> Corpus:
    """Read a corpus file; the alphabet is derived from the data."""
    text = Path(path).read_text(encoding="utf-8")
    sequences = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        sequences.append(_parse_line(line, lineno))
    if not sequences:
        raise CorpusError("empty corpus")
    return Corpus(tuple(sequences))


def _fraction_text(value: Fraction) -> str:
    return f"{value.numerator}/{value.denominator}"


def serialize(corpus: Corpus) -> str:
    """Render a corpus back to the line format (exact round trip)."""
    lines = []
    for seq in corpus.sequences:
        head = (
            f"{seq.id} {seq.time_signature[0]}/{seq.time_signature[1]} "
            f"{_fraction_text(seq.anacrusis_offset)}"
        )
        body = " , ".join(
            f"{ev.pitch}:{_fraction_text(ev.onset)}:{_fraction_text(ev.duration)}"
            for ev in seq.events
        )
        lines.append(f"{head} | {body}")
    return "\n".join(lines) + "\n"


def save(corpus: Corpus, path: str | Path) -> None:
    Path(path).write_text(serialize(corpus), encoding="utf-8")


@dataclass(frozen=True)
class FoldAssignment:
    """Maps every sequence id to a fold index in [0, k)."""

    k: int
    assignment: dict[str, int]

    def fold_ids(self, fold: int) -> list[str]:
        return [sid for sid, f in self.assignment.items() if f == fold]

    def validate_against(self, corpus: Corpus) -> None:
        corpus_ids = {s.id for s in corpus.sequences}
        assigned = set(self.assignment)
        if corpus_ids != assigned:
            missing = sorted(corpus_ids - assigned)
            extra = sorted(assigned - corpus_ids)
            raise CorpusError(
                f"fold assignment does not match corpus ids "
                f"(missing={missing[:5]}, extra={extra[:5]})"
            )
        for fold in self.assignment.values():
            if not 0 <= fold < self.k:
                raise CorpusError(f"fold index {fold} outside [0, {self.k})")


def split_folds(
    corpus: Corpus, k: int, seed: int | None = None,
    explicit: FoldAssignment | None = None,
) -> FoldAssignment:
    """Assign sequences to k folds, sizes differing by at most one.

    Deterministic for a given seed.  An explicit assignment (e.g. published
    fold indices loaded from file) is validated and returned verbatim.
    """
    if explicit is not None:
        explicit.validate_against(corpus)
        if explicit.k != k:
            raise CorpusError(f"explicit assignment has k={explicit.k}, expected {k}")
        return explicit
    if not 1 < k <= len(corpus.sequences):
        raise CorpusError(f"k={k} out of range for {len(corpus.sequences)} sequences")
    import random

    ids = [s.id for s in corpus.sequences]
    rng = random.Random(seed)
    rng.shuffle(ids)
    assignment = {sid: i % k for i, sid in enumerate(ids)}
    return FoldAssignment(k, assignment)


def load_folds(path: str | Path) -> FoldAssignment:
    assignment: dict[str, int] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise CorpusError(f"fold file line {lineno}: expected '<id> <fold>'")
        try:
            assignment[parts[0]] = int(parts[1])
        except ValueError as exc:
            raise CorpusError(f"fold file line {lineno}: bad fold index") from exc
    if not assignment:
        raise CorpusError("empty fold file")
    return FoldAssignment(max(assignment.values()) + 1, assignment)


def save_folds(folds: FoldAssignment, path: str | Path) -> None:
    lines = [f"{sid} {fold}" for sid, fold in folds.assignment.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def train_test_split(
    corpus: Corpus, folds: FoldAssignment, test_fold: int
) -> tuple[Corpus, Corpus]:
    """Partition by fold; both halves keep the parent alphabet."""
    if not 0 <= test_fold < folds.k:
        raise CorpusError(f"test fold {test_fold} outside [0, {folds.k})")
    folds.validate_against(corpus)
    train, test = [], []
    for seq in corpus.sequences:
        (test if folds.assignment[seq.id] == test_fold else train).append(seq)
    return (
        Corpus(tuple(train), corpus.alphabet),
        Corpus(tuple(test), corpus.alphabet),
    )


def split_validation(
    corpus: Corpus, fraction: float = 0.1, seed: int | None = None
) -> tuple[Corpus, Corpus]:
    """Carve a validation subset off a training corpus by sequence count."""
    import random

    n = len(corpus.sequences)
    n_val = max(1, int(round(n * fraction)))
    if n_val >= n:
        raise CorpusError("validation split would consume the whole corpus")
    ids = [s.id for s in corpus.sequences]
    rng = random.Random(seed)
    rng.shuffle(ids)
    val_ids = set(ids[:n_val])
    train = tuple(s for s in corpus.sequences if s.id not in val_ids)
    val = tuple(s for s in corpus.sequences if s.id in val_ids)
    return Corpus(train, corpus.alphabet), Corpus(val, corpus.alphabet)


def sequence_from_pitches(
    seq_id: str, pitches, duration: Fraction = Fraction(1),
    time_signature: tuple[int, int] = (4, 4),
) -> EventSequence:
    """Build a sequence with uniform durations and unit-spaced onsets."""
    events = tuple(
        Event(int(p), Fraction(i) * duration, duration) for i, p in enumerate(pitches)
    )
    return EventSequence(seq_id, events, time_signature, Fraction(0))
