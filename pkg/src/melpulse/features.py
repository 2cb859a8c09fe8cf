"""Temporally extended indicator features and the sparse feature matrix.

A basis feature is a (viewpoint, past-offset, value) triple; offset zero
addresses the event being predicted.  Compound features are conjunctions
of basis features and must contain at least one offset-zero basis whose
viewpoint constrains the outcome, otherwise the conjunction is constant
across outcomes and carries no predictive value.

``evaluate`` is the scalar indicator (the reference semantics); ``build_matrix``
produces the same cells vectorized into one CSR matrix of shape
(n_data * n_outcomes, n_features), with per-datum contiguous row blocks so a
datum's slice multiplies against the weight vector without densification.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .corpus import Corpus, EventSequence
from .viewpoints import (
    KEYED,
    PREDICTIVE,
    TAG_ORDER,
    TEMPORAL,
    ZERO_OFFSET_ONLY,
    KeyEstimate,
    KeyProfiles,
    ViewpointId,
    contour,
    derive,
    extended_contour,
    find_key,
    key_degree,
    metrical_weights,
    octave_invariant,
    tonic_degree,
    value_from_text,
    value_sort_key,
    value_to_text,
)


class FeatureError(ValueError):
    """Raised for structurally invalid basis or compound features."""


@dataclass(frozen=True)
class BasisFeature:
    """Indicator over one (viewpoint, offset, value) triple."""

    viewpoint: ViewpointId
    offset: int
    value: object

    def __post_init__(self):
        if self.offset < 0:
            raise FeatureError("offset must be >= 0")
        if self.offset > 0 and self.viewpoint in ZERO_OFFSET_ONLY:
            raise FeatureError(
                f"{self.viewpoint.value} basis features only exist at offset 0"
            )

    @property
    def predictive(self) -> bool:
        return self.offset == 0 and self.viewpoint in PREDICTIVE

    def sort_key(self) -> tuple:
        return (
            TAG_ORDER[self.viewpoint],
            -self.offset,
            value_sort_key(self.viewpoint, self.value),
        )

    def to_text(self) -> str:
        tag = self.viewpoint.value
        return f"{tag}[σ={self.offset},ν={value_to_text(self.viewpoint, self.value)}]"

    @staticmethod
    def from_text(text: str) -> "BasisFeature":
        tag, _, rest = text.partition("[")
        body = rest.rstrip("]")
        sig_part, _, val_part = body.partition(",")
        offset = int(sig_part.split("=", 1)[1])
        value_text = val_part.split("=", 1)[1]
        vp = ViewpointId(tag)
        return BasisFeature(vp, offset, value_from_text(vp, value_text))


@dataclass(frozen=True)
class CompoundFeature:
    """Conjunction of basis features in canonical order."""

    basis: tuple[BasisFeature, ...]

    def __post_init__(self):
        if not self.basis:
            raise FeatureError("compound feature needs at least one basis feature")
        ordered = tuple(sorted(self.basis, key=BasisFeature.sort_key))
        slots = [(b.viewpoint, b.offset) for b in ordered]
        if len(set(slots)) != len(slots):
            raise FeatureError("duplicate (viewpoint, offset) in compound")
        if not any(b.predictive for b in ordered):
            raise FeatureError("compound feature has no predictive offset-0 basis")
        object.__setattr__(self, "basis", ordered)

    def __len__(self) -> int:
        return len(self.basis)

    @property
    def max_offset(self) -> int:
        """Temporal extent: how far back the feature reaches."""
        return max(b.offset for b in self.basis)

    @property
    def offsets(self) -> frozenset[int]:
        return frozenset(b.offset for b in self.basis)

    @property
    def holes(self) -> int:
        """Missing offsets versus the contiguous gram spanning this extent."""
        offs = self.offsets
        return (max(offs) - min(offs) + 1) - len(offs)

    @property
    def contiguous(self) -> bool:
        return self.holes == 0 and min(self.offsets) == 0

    def sort_key(self) -> tuple:
        return tuple(b.sort_key() for b in self.basis)

    def with_basis(self, extra: BasisFeature) -> "CompoundFeature":
        return CompoundFeature(self.basis + (extra,))

    def shifted(self, by: int = 1) -> "CompoundFeature":
        """All offsets moved into the past; only valid for temporal bases."""
        return CompoundFeature(
            tuple(BasisFeature(b.viewpoint, b.offset + by, b.value) for b in self.basis)
        )

    def viewpoints(self) -> frozenset[ViewpointId]:
        return frozenset(b.viewpoint for b in self.basis)

    def to_text(self) -> str:
        return " & ".join(b.to_text() for b in self.basis)

    @staticmethod
    def from_text(text: str) -> "CompoundFeature":
        return CompoundFeature(
            tuple(BasisFeature.from_text(part.strip()) for part in text.split("&"))
        )


@dataclass
class FeatureSet:
    """Parallel feature list and weight vector; the unit PULSE grows/culls."""

    features: list[CompoundFeature] = field(default_factory=list)
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if len(self.features) != self.weights.shape[0]:
            raise FeatureError("features and weights must be parallel")
        if len(set(self.features)) != len(self.features):
            raise FeatureError("duplicate compound features")

    def __len__(self) -> int:
        return len(self.features)

    def index(self) -> dict[CompoundFeature, int]:
        return {f: i for i, f in enumerate(self.features)}

    def add(self, feature: CompoundFeature, weight: float = 0.0) -> None:
        self.features.append(feature)
        self.weights = np.append(self.weights, weight)

    def select(self, keep: np.ndarray) -> "FeatureSet":
        keep = np.asarray(keep)
        return FeatureSet(
            [self.features[i] for i in keep], self.weights[keep].copy()
        )

    def active_mask(self) -> np.ndarray:
        return self.weights != 0.0


@dataclass(frozen=True)
class KeySettings:
    """How per-song key estimates are computed for anchored viewpoints."""

    profiles: KeyProfiles
    duration_weighted: bool = True


class SequenceContext:
    """Per-sequence cache of viewpoint streams and the key estimate."""

    def __init__(
        self,
        seq: EventSequence,
        key_settings: KeySettings | None = None,
        key: KeyEstimate | None = None,
    ):
        self.seq = seq
        self._key_settings = key_settings
        self._key = key
        self._streams: dict[ViewpointId, list] = {}
        self._metrical: list[int] | None = None

    @property
    def key(self) -> KeyEstimate:
        if self._key is None:
            if self._key_settings is None:
                raise FeatureError(
                    f"sequence {self.seq.id!r}: anchored viewpoint needs key settings"
                )
            self._key = find_key(
                self.seq,
                self._key_settings.profiles,
                self._key_settings.duration_weighted,
            )
        return self._key

    def stream(self, vp: ViewpointId) -> list:
        if vp not in self._streams:
            key = self.key if vp in KEYED else None
            self._streams[vp] = derive(self.seq, vp, key)
        return self._streams[vp]

    def metrical(self) -> list[int]:
        if self._metrical is None:
            self._metrical = metrical_weights(self.seq)
        return self._metrical


@dataclass(frozen=True)
class Datum:
    """One prediction instance: a sequence position with its cached context."""

    context: SequenceContext
    t: int

    @property
    def true_pitch(self) -> int:
        return self.context.seq.events[self.t].pitch


def corpus_data(
    corpus: Corpus, key_settings: KeySettings | None = None
) -> list[Datum]:
    """All (sequence, position) prediction instances of a corpus."""
    data = []
    for seq in corpus.sequences:
        ctx = SequenceContext(seq, key_settings)
        data.extend(Datum(ctx, t) for t in range(len(seq)))
    return data


def predicted_value(datum: Datum, vp: ViewpointId, outcome: int):
    """Viewpoint value at the datum's position with the outcome substituted.

    Returns ``None`` where the mapping is partial (song starts)."""
    t = datum.t
    seq = datum.context.seq
    if vp is ViewpointId.PITCH:
        return outcome
    if vp in (
        ViewpointId.INTERVAL,
        ViewpointId.OCTAVE_INTERVAL,
        ViewpointId.CONTOUR,
        ViewpointId.EXTENDED_CONTOUR,
    ):
        if t == 0:
            return None
        iv = outcome - seq.events[t - 1].pitch
        if vp is ViewpointId.INTERVAL:
            return iv
        if vp is ViewpointId.OCTAVE_INTERVAL:
            return octave_invariant(iv)
        if vp is ViewpointId.CONTOUR:
            return contour(iv)
        return extended_contour(iv)
    if vp is ViewpointId.METRICAL_WEIGHT:
        return datum.context.metrical()[t]
    if vp is ViewpointId.KEY:
        return key_degree(outcome, datum.context.key)
    if vp is ViewpointId.TONIC:
        return tonic_degree(outcome, datum.context.key)
    if vp is ViewpointId.FIRST1 or vp is ViewpointId.FIRST2 or vp is ViewpointId.FIRST3:
        anchor = {"F1": 0, "F2": 1, "F3": 2}[vp.value]
        if t <= anchor:
            return None
        return outcome - seq.events[anchor].pitch
    if vp is ViewpointId.METRICAL_PITCH:
        return (datum.context.metrical()[t], outcome)
    if vp is ViewpointId.METRICAL_KEY:
        return (datum.context.metrical()[t], key_degree(outcome, datum.context.key))
    if vp is ViewpointId.METRICAL_TONIC:
        return (datum.context.metrical()[t], tonic_degree(outcome, datum.context.key))
    raise FeatureError(f"unknown viewpoint {vp}")


def evaluate(feature: CompoundFeature, datum: Datum, outcome: int) -> int:
    """Scalar indicator: 1 iff every basis feature matches.

    Undefined viewpoint values and reaches before the song start count as
    mismatches, never as errors, so every feature scores uniformly on all
    data.
    """
    for b in feature.basis:
        if b.offset > 0:
            pos = datum.t - b.offset
            if pos < 0:
                return 0
            value = datum.context.stream(b.viewpoint)[pos]
        else:
            value = predicted_value(datum, b.viewpoint, outcome)
        if value is None or value != b.value:
            return 0
    return 1


@dataclass
class FeatureMatrix:
    """Binary (datum, feature, outcome) tensor in stacked CSR layout.

    Row ``d * n_outcomes + y`` holds feature indicators for datum ``d`` and
    outcome index ``y``.
    """

    matrix: sparse.csr_matrix
    true_outcome: np.ndarray
    n_data: int
    n_outcomes: int

    @property
    def n_features(self) -> int:
        return self.matrix.shape[1]

    @property
    def nnz(self) -> int:
        return self.matrix.nnz

    def value(self, d: int, f: int, y: int) -> int:
        return int(self.matrix[d * self.n_outcomes + y, f])

    def datum_slice(self, d: int) -> sparse.csr_matrix:
        start = d * self.n_outcomes
        return self.matrix[start : start + self.n_outcomes]

    def rows_for(self, data_idx: np.ndarray) -> np.ndarray:
        base = np.asarray(data_idx, dtype=np.int64) * self.n_outcomes
        return (base[:, None] + np.arange(self.n_outcomes)).ravel()

    def feature_nnz(self) -> np.ndarray:
        return np.asarray(self.matrix.getnnz(axis=0)).ravel()

    def select_features(self, keep: np.ndarray) -> "FeatureMatrix":
        keep = np.asarray(keep)
        return FeatureMatrix(
            self.matrix[:, keep].tocsr(), self.true_outcome, self.n_data, self.n_outcomes
        )


class _Codec:
    """Per-viewpoint integer codes for values; -1 is the undefined sentinel."""

    def __init__(self):
        self._codes: dict[ViewpointId, dict] = {}

    def code(self, vp: ViewpointId, value) -> int:
        if value is None:
            return -1
        table = self._codes.setdefault(vp, {})
        return table.setdefault(value, len(table))

    def lookup(self, vp: ViewpointId, value) -> int:
        """Code for a feature value; unseen values can never match."""
        if value is None:
            return -2
        return self._codes.get(vp, {}).get(value, -2)


def build_matrix(
    data: list[Datum],
    features: list[CompoundFeature],
    alphabet: tuple[int, ...],
    threads: int = 1,
) -> FeatureMatrix:
    """Evaluate every (datum, feature, outcome) cell into stacked CSR.

    Vectorizes over data and outcomes per feature; output is identical to
    looping ``evaluate`` over all cells and independent of ``threads``.
    """
    n_data = len(data)
    n_out = len(alphabet)
    n_feat = len(features)
    if n_data == 0 or n_feat == 0 or n_out == 0:
        mat = sparse.csr_matrix((n_data * n_out, n_feat), dtype=np.int8)
        true_outcome = _true_outcomes(data, alphabet)
        return FeatureMatrix(mat, true_outcome, n_data, n_out)

    codec = _Codec()
    ctx_slots: set[tuple[ViewpointId, int]] = set()
    pred_vps: set[ViewpointId] = set()
    for f in features:
        for b in f.basis:
            if b.offset > 0:
                ctx_slots.add((b.viewpoint, b.offset))
            else:
                pred_vps.add(b.viewpoint)

    past = _past_codes(data, ctx_slots, codec)
    pred = _predicted_codes(
        data, sorted(pred_vps, key=lambda v: TAG_ORDER[v]), alphabet, codec
    )

    def feature_cells(fi: int) -> np.ndarray:
        f = features[fi]
        mask = None
        for b in f.basis:
            if b.offset == 0:
                continue
            eq = past[(b.viewpoint, b.offset)] == codec.lookup(b.viewpoint, b.value)
            mask = eq if mask is None else (mask & eq)
        cell = None
        for b in f.basis:
            if b.offset > 0:
                continue
            eq = pred[b.viewpoint] == codec.lookup(b.viewpoint, b.value)
            cell = eq if cell is None else (cell & eq)
        if mask is not None:
            cell = cell & mask[:, None]
        d_idx, y_idx = np.nonzero(cell)
        return d_idx * n_out + y_idx

    if threads > 1 and n_feat > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_feature = list(pool.map(feature_cells, range(n_feat)))
    else:
        per_feature = [feature_cells(fi) for fi in range(n_feat)]

    rows = [r for r in per_feature if r.size]
    cols = [
        np.full(r.size, fi, dtype=np.int64)
        for fi, r in enumerate(per_feature)
        if r.size
    ]
    if rows:
        row_arr = np.concatenate(rows)
        col_arr = np.concatenate(cols)
        mat = sparse.csr_matrix(
            (np.ones(row_arr.size, dtype=np.int8), (row_arr, col_arr)),
            shape=(n_data * n_out, n_feat),
        )
    else:
        mat = sparse.csr_matrix((n_data * n_out, n_feat), dtype=np.int8)
    return FeatureMatrix(mat, _true_outcomes(data, alphabet), n_data, n_out)


def _true_outcomes(data: list[Datum], alphabet: tuple[int, ...]) -> np.ndarray:
    lookup = {p: i for i, p in enumerate(alphabet)}
    return np.array([lookup[d.true_pitch] for d in data], dtype=np.int64)


def _past_codes(data, ctx_slots, codec: _Codec) -> dict:
    past: dict[tuple[ViewpointId, int], np.ndarray] = {}
    stream_codes: dict[tuple[int, ViewpointId], list[int]] = {}
    for vp, offset in sorted(ctx_slots, key=lambda s: (TAG_ORDER[s[0]], s[1])):
        arr = np.full(len(data), -1, dtype=np.int64)
        for di, datum in enumerate(data):
            pos = datum.t - offset
            if pos < 0:
                continue
            cache_key = (id(datum.context), vp)
            if cache_key not in stream_codes:
                stream_codes[cache_key] = [
                    codec.code(vp, v) for v in datum.context.stream(vp)
                ]
            arr[di] = stream_codes[cache_key][pos]
        past[(vp, offset)] = arr
    return past


def _predicted_codes(data, vps, alphabet, codec: _Codec) -> dict:
    # sequential on purpose: value codes are assigned in encounter order,
    # which keeps the whole build deterministic
    n_out = len(alphabet)
    out = {vp: np.full((len(data), n_out), -1, dtype=np.int64) for vp in vps}
    for di, datum in enumerate(data):
        for vp in vps:
            row = out[vp]
            for yi, pitch in enumerate(alphabet):
                row[di, yi] = codec.code(vp, predicted_value(datum, vp, pitch))
    return out


def filter_irrelevant(
    fs: FeatureSet, matrix: FeatureMatrix
) -> tuple[FeatureSet, FeatureMatrix, np.ndarray]:
    """Drop the features whose matrix slice is all zero.

    Returns the compacted set and matrix plus the kept indices.
    """
    nnz = matrix.feature_nnz()
    keep = np.nonzero(nnz > 0)[0]
    if keep.size == len(fs):
        return fs, matrix, keep
    return fs.select(keep), matrix.select_features(keep), keep
