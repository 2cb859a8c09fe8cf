"""Interpolated n-gram baseline and entropy-weighted model combination.

The n-gram predictor blends maximum-likelihood estimates across context
lengths 0..n-1 with weights proportional to context length + 1 over the
lengths whose context was seen, and add-one smoothing at length 0, so no
outcome ever receives probability zero.

Combination follows the weighted arithmetic-mean (sum) or geometric-mean
(product) rule.  Per-distribution weights are
``[(-sum_{s in X} log p(s)) / log |X|]^(-b)`` with bias ``b >= 0``; ``b=0``
makes all weights one.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Corpus, EventSequence
from .model import PredictiveDistribution

SUM_RULE = "sum"
PRODUCT_RULE = "product"

BIAS_GRID = (0, 1, 2, 3, 4, 5, 6, 16, 32)


@dataclass
class NGramModel:
    """Occurrence counts per context length over a fixed alphabet."""

    order: int  # maximum n; contexts have length <= n - 1
    alphabet: tuple[int, ...]
    counts: dict = field(default_factory=dict)
    blend: tuple[float, ...] | None = None  # per-length weights, default len+1

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("order must be >= 1")
        if not self.counts:
            self.counts = {
                length: defaultdict(lambda: defaultdict(int))
                for length in range(self.order)
            }

    def fit(self, corpus_or_sequences) -> "NGramModel":
        sequences = getattr(corpus_or_sequences, "sequences", corpus_or_sequences)
        for seq in sequences:
            self.fit_sequence(seq.pitches if hasattr(seq, "pitches") else tuple(seq))
        return self

    def fit_sequence(self, pitches: tuple[int, ...]) -> None:
        for t, pitch in enumerate(pitches):
            for length in range(self.order):
                if t - length < 0:
                    break
                context = tuple(pitches[t - length : t])
                self.counts[length][context][pitch] += 1

    def predict(self, context: tuple[int, ...]) -> PredictiveDistribution:
        return ngram_predict(self, context)


def ngram_predict(model: NGramModel, context) -> PredictiveDistribution:
    """Blend per-length ML estimates; strictly positive everywhere."""
    context = tuple(context)
    alphabet = model.alphabet
    n_out = len(alphabet)
    total_weight = 0.0
    probs = np.zeros(n_out)
    for length in range(model.order):
        if length > len(context):
            break
        ctx = context[len(context) - length :]
        table = model.counts[length].get(ctx)
        if length == 0:
            table = model.counts[0].get((), {})
            counts = np.array([table.get(p, 0) for p in alphabet], dtype=np.float64)
            estimate = (counts + 1.0) / (counts.sum() + n_out)
        elif table:
            counts = np.array([table.get(p, 0) for p in alphabet], dtype=np.float64)
            estimate = counts / counts.sum()
        else:
            continue
        weight = (
            model.blend[length] if model.blend is not None else float(length + 1)
        )
        probs += weight * estimate
        total_weight += weight
    probs /= total_weight
    return PredictiveDistribution(probs)


class NGramPredictor:
    """Per-sequence distributions from a fitted n-gram model."""

    def __init__(self, model: NGramModel):
        self.model = model

    def predict_sequence(self, seq: EventSequence) -> list[PredictiveDistribution]:
        pitches = seq.pitches
        return [
            ngram_predict(self.model, pitches[max(0, t - self.model.order + 1) : t])
            for t in range(len(pitches))
        ]


@dataclass(frozen=True)
class CombinationConfig:
    rule: str = SUM_RULE
    bias: float = 0.0

    def __post_init__(self):
        if self.rule not in (SUM_RULE, PRODUCT_RULE):
            raise ValueError(f"unknown combination rule {self.rule!r}")
        if self.bias < 0:
            raise ValueError("bias must be >= 0")


def distribution_weight(probs: np.ndarray, bias: float) -> float:
    """Normalized negative log-prob sum over the alphabet, to the -bias."""
    if bias == 0:
        return 1.0
    n = probs.shape[0]
    with np.errstate(divide="ignore"):
        logs = np.log(probs)
    total = -logs.sum()
    if not np.isfinite(total):
        return 0.0  # a hard zero anywhere sends the bracket to infinity
    bracket = total / np.log(n)
    return float(bracket**-bias)


def combine(
    dists: list[PredictiveDistribution], cfg: CombinationConfig
) -> PredictiveDistribution:
    """Weighted arithmetic or geometric mean of aligned distributions."""
    if not dists:
        raise ValueError("nothing to combine")
    n = dists[0].probs.shape[0]
    for d in dists:
        if d.probs.shape[0] != n:
            raise ValueError("distributions are over different alphabets")
    weights = np.array([distribution_weight(d.probs, cfg.bias) for d in dists])
    if weights.sum() == 0:
        weights = np.ones(len(dists))
    if cfg.rule == SUM_RULE:
        stacked = np.stack([d.probs for d in dists])
        merged = (weights[:, None] * stacked).sum(axis=0) / weights.sum()
        return PredictiveDistribution(merged / merged.sum())
    # product rule in log space, then normalized
    with np.errstate(divide="ignore"):
        logs = np.stack([np.log(d.probs) for d in dists])
    pooled = (weights[:, None] * logs).sum(axis=0) / weights.sum()
    pooled -= pooled.max()
    merged = np.exp(pooled)
    return PredictiveDistribution(merged / merged.sum())


class HybridPredictor:
    """Event-aligned combination of two or more source predictors."""

    def __init__(self, sources: list, cfg: CombinationConfig):
        if not sources:
            raise ValueError("hybrid needs at least one source")
        self.sources = sources
        self.cfg = cfg

    def predict_sequence(self, seq: EventSequence) -> list[PredictiveDistribution]:
        per_source = [src.predict_sequence(seq) for src in self.sources]
        lengths = {len(d) for d in per_source}
        if lengths != {len(seq)}:
            raise ValueError(
                f"sequence {seq.id!r}: source predictions do not align with events"
            )
        return [
            combine([d[t] for d in per_source], self.cfg) for t in range(len(seq))
        ]


class StoredDistributions:
    """Predictions imported from an interchange CSV.

    Format: header ``sequence_id,t,p_1..p_|X|``; one row per event.  The
    importer validates the per-sequence row count against the corpus and
    refuses mismatches rather than silently substituting.
    """

    def __init__(self, table: dict[str, list[np.ndarray]], n_outcomes: int):
        self.table = table
        self.n_outcomes = n_outcomes

    @staticmethod
    def load(path: str | Path, corpus: Corpus) -> "StoredDistributions":
        n_out = len(corpus.alphabet)
        rows: dict[str, dict[int, np.ndarray]] = defaultdict(dict)
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines:
            raise ValueError("empty distribution file")
        header = lines[0].split(",")
        if len(header) != 2 + n_out:
            raise ValueError(
                f"distribution file has {len(header) - 2} probability columns, "
                f"alphabet needs {n_out}"
            )
        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            parts = line.split(",")
            if len(parts) != 2 + n_out:
                raise ValueError(f"line {lineno}: wrong column count")
            seq_id, t = parts[0], int(parts[1])
            probs = np.array([float(x) for x in parts[2:]])
            rows[seq_id][t] = probs
        table: dict[str, list[np.ndarray]] = {}
        for seq in corpus.sequences:
            got = rows.get(seq.id)
            if got is None:
                raise ValueError(f"no distributions for sequence {seq.id!r}")
            if sorted(got) != list(range(len(seq))):
                raise ValueError(
                    f"sequence {seq.id!r}: expected rows t=0..{len(seq) - 1}"
                )
            table[seq.id] = [got[t] for t in range(len(seq))]
        return StoredDistributions(table, n_out)

    def predict_sequence(self, seq: EventSequence) -> list[PredictiveDistribution]:
        if seq.id not in self.table:
            raise ValueError(f"no stored distributions for sequence {seq.id!r}")
        return [PredictiveDistribution(p) for p in self.table[seq.id]]


def save_distributions(
    predictions: dict[str, list[PredictiveDistribution]],
    n_outcomes: int,
    path: str | Path,
) -> None:
    lines = ["sequence_id,t," + ",".join(f"p_{i + 1}" for i in range(n_outcomes))]
    for seq_id in predictions:
        for t, dist in enumerate(predictions[seq_id]):
            probs = ",".join(repr(float(p)) for p in dist.probs)
            lines.append(f"{seq_id},{t},{probs}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def select_bias(
    sources: list,
    corpus: Corpus,
    rule: str,
    grid=BIAS_GRID,
) -> tuple[float, list[tuple[float, float]]]:
    """Pick the bias minimizing hybrid bits over a corpus (training split)."""
    from .evalgen import cross_entropy

    trace = []
    best_bias, best_bits = None, None
    for bias in grid:
        hybrid = HybridPredictor(sources, CombinationConfig(rule, float(bias)))
        report = cross_entropy(hybrid, corpus)
        trace.append((float(bias), report.dataset_bits))
        if best_bits is None or report.dataset_bits < best_bits:
            best_bias, best_bits = float(bias), report.dataset_bits
    return best_bias, trace
