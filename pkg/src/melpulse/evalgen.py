"""Cross-entropy evaluation, entropy profiles, generation, model reports.

Predictors expose ``predict_sequence(seq) -> list[PredictiveDistribution]``;
evaluation walks test corpora event by event (all positions included, t=0
too).  Generation decodes from a trained long-term model either by beam
search or by thresholded iterative random walk, both seeded and
reproducible; generated sequences carry uniform durations since durations
are not modeled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import model as crf
from .corpus import Corpus, EventSequence, sequence_from_pitches
from .features import Datum, SequenceContext, build_matrix
from .model import PredictiveDistribution
from .pulse import TrainedModel
from .viewpoints import ViewpointId, find_key

BEAM = "beam"
ITERATIVE_RANDOM_WALK = "iterative_random_walk"

LOG2 = math.log(2.0)


@dataclass
class EvalReport:
    """Event-weighted bits and accuracy over a test corpus."""

    dataset_bits: float
    accuracy: float
    n_events: int
    per_sequence_bits: dict[str, float]
    zero_probability_events: list[tuple[str, int]] = field(default_factory=list)


def _bits_of(dist: PredictiveDistribution, outcome_idx: int) -> float:
    p = dist.probs[outcome_idx]
    if p <= 0.0:
        return math.inf
    return -math.log2(p)


def cross_entropy(predictor, corpus: Corpus) -> EvalReport:
    """Mean -log2 p(true event) over all events, plus argmax accuracy.

    Argmax ties break toward the lowest pitch.  A zero probability on any
    true event makes the report infinite and lists the offending
    positions.
    """
    index = {p: i for i, p in enumerate(corpus.alphabet)}
    total_bits = 0.0
    hits = 0
    n_events = 0
    per_seq: dict[str, float] = {}
    offenders: list[tuple[str, int]] = []
    for seq in corpus.sequences:
        dists = predictor.predict_sequence(seq)
        if len(dists) != len(seq):
            raise ValueError(f"predictor returned {len(dists)} rows for {seq.id!r}")
        seq_bits = 0.0
        for t, ev in enumerate(seq.events):
            yi = index[ev.pitch]
            bits = _bits_of(dists[t], yi)
            if math.isinf(bits):
                offenders.append((seq.id, t))
            seq_bits += bits
            if dists[t].argmax_lowest() == yi:
                hits += 1
        per_seq[seq.id] = seq_bits / len(seq)
        total_bits += seq_bits
        n_events += len(seq)
    return EvalReport(
        dataset_bits=total_bits / n_events,
        accuracy=hits / n_events,
        n_events=n_events,
        per_sequence_bits=per_seq,
        zero_probability_events=offenders,
    )


def entropy_profile(predictor, seq: EventSequence, alphabet) -> list[float]:
    """-log2 p(s_t | context) per position; its mean is the sequence bits."""
    index = {p: i for i, p in enumerate(alphabet)}
    dists = predictor.predict_sequence(seq)
    return [_bits_of(dists[t], index[ev.pitch]) for t, ev in enumerate(seq.events)]


@dataclass(frozen=True)
class GenerationConfig:
    method: str = BEAM
    beams: int = 5
    threshold: float = 0.65
    length: int = 32
    prime: tuple[int, ...] = ()
    restarts: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.method not in (BEAM, ITERATIVE_RANDOM_WALK):
            raise ValueError(f"unknown generation method {self.method!r}")
        if self.beams < 1:
            raise ValueError("need at least one beam")
        if not 0 < self.threshold <= 1:
            raise ValueError("threshold must be in (0, 1]")
        if self.restarts < 1:
            raise ValueError("need at least one restart")
        if self.length <= len(self.prime):
            raise ValueError("target length must exceed the prime")


class _StepPredictor:
    """Distribution for the next event of a growing pitch sequence."""

    def __init__(self, model: TrainedModel):
        self.model = model
        self._uses_key = any(
            b.viewpoint
            in (
                ViewpointId.KEY,
                ViewpointId.TONIC,
                ViewpointId.METRICAL_KEY,
                ViewpointId.METRICAL_TONIC,
            )
            for f in model.features
            for b in f.basis
        )

    def next_distribution(self, pitches: tuple[int, ...]) -> PredictiveDistribution:
        placeholder = self.model.alphabet[0]
        probe = sequence_from_pitches("generation", pitches + (placeholder,))
        key = None
        if self._uses_key and pitches:
            settings = self.model.key_settings()
            if settings is None:
                raise ValueError("model has anchored features but no key profiles")
            prefix = sequence_from_pitches("generation-context", pitches)
            key = find_key(prefix, settings.profiles, settings.duration_weighted)
        ctx = SequenceContext(probe, self.model.key_settings(), key=key)
        datum = Datum(ctx, len(pitches))
        matrix = build_matrix([datum], self.model.features, self.model.alphabet)
        return crf.predict(matrix, self.model.weights, 0)


@dataclass
class GeneratedSequence:
    pitches: tuple[int, ...]
    mean_bits: float

    def to_sequence(self, seq_id: str = "generated") -> EventSequence:
        return sequence_from_pitches(seq_id, self.pitches, Fraction(1))


def beam_search(model: TrainedModel, cfg: GenerationConfig) -> GeneratedSequence:
    """Deterministic best-cumulative-probability decoding with k slots.

    With one slot this is exactly the greedy argmax walk.  Ties are broken
    by lexicographic pitch order of the candidate sequences.
    """
    stepper = _StepPredictor(model)
    alphabet = model.alphabet
    k = cfg.beams
    beams: list[tuple[float, tuple[int, ...]]] = [(0.0, tuple(cfg.prime))]
    n_new = cfg.length - len(cfg.prime)
    for _ in range(n_new):
        candidates: list[tuple[float, tuple[int, ...]]] = []
        for logp, pitches in beams:
            dist = stepper.next_distribution(pitches)
            order = sorted(range(len(alphabet)), key=lambda i: (-dist.probs[i], i))
            for yi in order[:k]:
                p = dist.probs[yi]
                step_logp = math.log(p) if p > 0 else -math.inf
                candidates.append((logp + step_logp, pitches + (alphabet[yi],)))
        candidates.sort(key=lambda c: (-c[0], c[1]))
        beams = candidates[:k]
    best_logp, best = beams[0]
    mean_bits = -best_logp / (n_new * LOG2) if n_new else 0.0
    return GeneratedSequence(best, mean_bits)


def _admissible(probs: np.ndarray, threshold: float) -> np.ndarray:
    return np.nonzero(probs >= threshold * probs.max())[0]


def iterative_random_walk(
    model: TrainedModel, cfg: GenerationConfig
) -> GeneratedSequence:
    """Best of repeated thresholded sampling walks, by model bits.

    A step may only sample outcomes with p >= threshold * max p
    (renormalized); the emitted bits are measured under the unrestricted
    distribution.
    """
    stepper = _StepPredictor(model)
    alphabet = model.alphabet
    n_new = cfg.length - len(cfg.prime)
    best: GeneratedSequence | None = None
    for restart in range(cfg.restarts):
        rng = np.random.default_rng(cfg.seed + restart)
        pitches = tuple(cfg.prime)
        logp = 0.0
        for _ in range(n_new):
            dist = stepper.next_distribution(pitches)
            keep = _admissible(dist.probs, cfg.threshold)
            restricted = dist.probs[keep]
            restricted = restricted / restricted.sum()
            yi = int(keep[rng.choice(len(keep), p=restricted)])
            logp += math.log(dist.probs[yi])
            pitches = pitches + (alphabet[yi],)
        mean_bits = -logp / (n_new * LOG2) if n_new else 0.0
        if best is None or mean_bits < best.mean_bits:
            best = GeneratedSequence(pitches, mean_bits)
    assert best is not None
    return best


def generate(model: TrainedModel, cfg: GenerationConfig) -> GeneratedSequence:
    if cfg.method == BEAM:
        return beam_search(model, cfg)
    return iterative_random_walk(model, cfg)


@dataclass
class AnalysisReport:
    """Structural summaries of a trained feature set."""

    type_weight_share: dict[str, float]
    zero_order_weights: dict[str, list[tuple[str, float]]]
    top_motifs: dict[int, tuple[str, float]]
    extent_histogram: dict[tuple[int, int], float]
    holes_histogram: dict[tuple[int, int], int]


def _type_label(feature) -> str:
    tags = sorted({b.viewpoint.value for b in feature.basis},
                  key=lambda t: (len(t), t))
    label = "+".join(tags)
    if len(feature) > 1 or feature.max_offset > 0:
        label += "*"
    return label


def analyze(model: TrainedModel) -> AnalysisReport:
    """Weight shares, zero-order tables, top motifs, extent/hole histograms."""
    from .viewpoints import value_to_text

    features = model.features
    weights = model.weights
    total_abs = float(np.abs(weights).sum())

    shares: dict[str, float] = {}
    zero_order: dict[str, list[tuple[str, float]]] = {}
    extent: dict[tuple[int, int], float] = {}
    holes: dict[tuple[int, int], int] = {}
    motifs: dict[int, tuple[str, float]] = {}

    for f, w in zip(features, weights):
        label = _type_label(f)
        shares[label] = shares.get(label, 0.0) + abs(float(w))

        if len(f) == 1 and f.max_offset == 0:
            basis = f.basis[0]
            tag = basis.viewpoint.value
            zero_order.setdefault(tag, []).append(
                (value_to_text(basis.viewpoint, basis.value), float(w))
            )

        for b in f.basis:
            key = (b.offset, len(f))
            extent[key] = extent.get(key, 0.0) + abs(float(w))

        hkey = (len(f), f.holes)
        holes[hkey] = holes.get(hkey, 0) + 1

        # contiguous interval motifs: all-interval compounds spanning 0..L-1
        vps = f.viewpoints()
        if vps == {ViewpointId.INTERVAL} and len(f) > 1 and f.contiguous:
            length = len(f)
            text = ",".join(
                str(b.value) for b in sorted(f.basis, key=lambda b: -b.offset)
            )
            if length not in motifs or float(w) > motifs[length][1]:
                motifs[length] = (text, float(w))

    if total_abs > 0:
        shares = {k: v / total_abs for k, v in shares.items()}
    for tag in zero_order:
        zero_order[tag].sort()
    return AnalysisReport(shares, zero_order, motifs, extent, holes)
