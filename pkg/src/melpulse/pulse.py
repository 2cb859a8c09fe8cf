"""Feature-discovery driver: grow candidates, optimize, cull, repeat.

The long-term model alternates backwards temporal expansion of the active
feature set with L1-regularized optimization until the set stops changing.
The short-term model is fit online within a single piece: one
grow-optimize-shrink round per event, with forwards or continuous
expansion and regularization strengths decaying over the piece.

Expansion operators are declared by a small grammar, e.g. ``P I* C* K M_K``:
each token initializes order-0 features for one type; a ``*`` marks the
group for temporal expansion; parenthesized groups like ``(P I)*`` expand
intermingled.  Anchored and metrical types cannot be starred since they
only exist at offset zero.

Note on the short-term model: key estimates and the metrical grid's
finest spacing are per-piece preprocessing over the whole sequence, so
only configurations without K/T/M-family features are strictly causal
(the default ``P I* F1`` is).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import model as crf
from . import optimizer as opt
from .corpus import Corpus, EventSequence, split_validation
from .features import (
    BasisFeature,
    CompoundFeature,
    Datum,
    FeatureError,
    FeatureSet,
    KeySettings,
    SequenceContext,
    build_matrix,
    corpus_data,
    filter_irrelevant,
)
from .model import PredictiveDistribution
from .viewpoints import (
    TAG_ORDER,
    TEMPORAL,
    KeyProfiles,
    ViewpointId,
    value_sort_key,
)

BACKWARDS = "backwards"
CONTINUOUS = "continuous"
FORWARDS = "forwards"

CRITERION_FLUCTUATION = "fluctuation"
CRITERION_SET_SIZE = "set_size"
CRITERION_VALIDATION = "validation_ema"

_GROUP_TOKEN = re.compile(r"\(([^)]+)\)(\*?)|(\S+)")

_NAME_TO_VPS = {
    "P": (ViewpointId.PITCH,),
    "I": (ViewpointId.INTERVAL,),
    "O": (ViewpointId.OCTAVE_INTERVAL,),
    "C": (ViewpointId.CONTOUR,),
    "X": (ViewpointId.EXTENDED_CONTOUR,),
    "K": (ViewpointId.KEY,),
    "T": (ViewpointId.TONIC,),
    "F1": (ViewpointId.FIRST1,),
    "F123": (ViewpointId.FIRST1, ViewpointId.FIRST2, ViewpointId.FIRST3),
    "M_P": (ViewpointId.METRICAL_PITCH,),
    "M_K": (ViewpointId.METRICAL_KEY,),
    "M_T": (ViewpointId.METRICAL_TONIC,),
}
_VPS_TO_NAME = {vps: name for name, vps in _NAME_TO_VPS.items()}


class PulseError(RuntimeError):
    """Raised for invalid expansion specs or driver misconfiguration."""


@dataclass(frozen=True)
class NPlusGroup:
    viewpoints: tuple[ViewpointId, ...]
    expand: bool

    def __post_init__(self):
        if not self.viewpoints:
            raise PulseError("empty feature group")
        if self.expand and not set(self.viewpoints) <= TEMPORAL:
            bad = [v.value for v in self.viewpoints if v not in TEMPORAL]
            raise PulseError(
                f"only temporal types may be expanded; {bad} are fixed at offset 0"
            )


@dataclass(frozen=True)
class NPlusSpec:
    """Parsed feature-construction declaration."""

    groups: tuple[NPlusGroup, ...]

    def __post_init__(self):
        if not self.groups:
            raise PulseError("feature spec declares no groups")

    def viewpoints(self) -> list[ViewpointId]:
        seen: list[ViewpointId] = []
        for group in self.groups:
            for vp in group.viewpoints:
                if vp not in seen:
                    seen.append(vp)
        return seen

    @staticmethod
    def parse(text: str) -> "NPlusSpec":
        groups = []
        rest = text.strip()
        if not rest:
            raise PulseError("empty feature spec")
        for match in _GROUP_TOKEN.finditer(rest):
            inner, star, single = match.group(1), match.group(2), match.group(3)
            if single is not None:
                name = single
                expand = name.endswith("*")
                if expand:
                    name = name[:-1]
                names = [name]
            else:
                names = inner.split()
                expand = star == "*"
            vps: list[ViewpointId] = []
            for name in names:
                if name not in _NAME_TO_VPS:
                    raise PulseError(f"unknown feature type {name!r}")
                vps.extend(_NAME_TO_VPS[name])
            groups.append(NPlusGroup(tuple(vps), expand))
        return NPlusSpec(tuple(groups))

    def to_text(self) -> str:
        parts = []
        for group in self.groups:
            star = "*" if group.expand else ""
            names: list[str] = []
            i = 0
            vps = group.viewpoints
            while i < len(vps):
                if vps[i : i + 3] in (_NAME_TO_VPS["F123"],):
                    names.append("F123")
                    i += 3
                    continue
                names.append(_VPS_TO_NAME[(vps[i],)])
                i += 1
            body = " ".join(names)
            if len(names) > 1:
                parts.append(f"({body}){star}")
            else:
                parts.append(f"{body}{star}")
        return " ".join(parts)


REG_KINDS = (
    "constant",
    "linear",
    "linear_no_zero",
    "polynomial",
    "exponential",
    "exponential_with_zero",
)


@dataclass(frozen=True)
class RegularizationSpec:
    """Global strengths, temporal-extent factors, and optional time decay.

    ``kind``/``alpha`` parameterize the L1 per-feature factor; the L2 factor
    has its own kind (constant by default, matching the tuned setups).
    """

    kind: str = "exponential"
    alpha: float = 2.0
    l1: float = 1e-8
    l2: float = 0.0
    l2_kind: str = "constant"
    l2_alpha: float = 1.0
    l1_tau: float | None = None
    l2_tau: float | None = None

    def __post_init__(self):
        if self.kind not in REG_KINDS or self.l2_kind not in REG_KINDS:
            raise PulseError(f"unknown regularization kind {self.kind!r}/{self.l2_kind!r}")
        if self.alpha <= 0 or self.l2_alpha <= 0:
            raise PulseError("alpha must be > 0")
        for tau in (self.l1_tau, self.l2_tau):
            if tau is not None and tau <= 0:
                raise PulseError("decay time constants must be > 0")

    def strengths_at(self, t: int | None = None) -> tuple[float, float]:
        """Global strengths, decayed to time index t when decay is active."""
        l1, l2 = self.l1, self.l2
        if t is not None:
            if self.l1_tau is not None:
                l1 *= math.exp(-t / self.l1_tau)
            if self.l2_tau is not None:
                l2 *= math.exp(-t / self.l2_tau)
        return l1, l2


def _extent_factor(kind: str, alpha: float, extent: int) -> float:
    if kind == "constant":
        return 1.0
    if kind == "linear":
        return alpha * extent
    if kind == "linear_no_zero":
        return alpha * extent + 1.0
    if kind == "polynomial":
        return float(extent**alpha)
    if kind == "exponential":
        return float(alpha**extent)
    # exponential_with_zero
    return float(alpha**extent) if extent > 0 else 0.0


def per_feature_factor(feature: CompoundFeature, spec: RegularizationSpec) -> float:
    """Temporal-extent dependent L1 multiplier."""
    return _extent_factor(spec.kind, spec.alpha, feature.max_offset)


def l2_per_feature_factor(feature: CompoundFeature, spec: RegularizationSpec) -> float:
    return _extent_factor(spec.l2_kind, spec.l2_alpha, feature.max_offset)


@dataclass(frozen=True)
class OuterConvergence:
    """Feature-discovery loop stopping rule."""

    criterion: str = CRITERION_FLUCTUATION
    tol: float = 0.01
    ema_decay: float = 0.9
    max_rounds: int = 50
    max_features: int = 2000
    validation_fraction: float = 0.1

    def __post_init__(self):
        if self.criterion not in (
            CRITERION_FLUCTUATION,
            CRITERION_SET_SIZE,
            CRITERION_VALIDATION,
        ):
            raise PulseError(f"unknown outer criterion {self.criterion!r}")
        if self.tol <= 0:
            raise PulseError("outer tolerance must be > 0")
        if self.max_rounds < 1 or self.max_features < 1:
            raise PulseError("caps must be >= 1")


def value_domains(data: list[Datum], viewpoints) -> dict[ViewpointId, list]:
    """Occurring values per viewpoint at the data positions, sorted."""
    values: dict[ViewpointId, set] = {vp: set() for vp in viewpoints}
    for datum in data:
        for vp in viewpoints:
            v = datum.context.stream(vp)[datum.t]
            if v is not None:
                values[vp].add(v)
    return {
        vp: sorted(vals, key=lambda v: value_sort_key(vp, v))
        for vp, vals in values.items()
    }


def init_features(spec: NPlusSpec, domains: dict[ViewpointId, list]) -> list[CompoundFeature]:
    """One order-0 singleton per declared type and occurring value."""
    out: list[CompoundFeature] = []
    seen = set()
    for group in spec.groups:
        for vp in group.viewpoints:
            for value in domains.get(vp, ()):
                feature = CompoundFeature((BasisFeature(vp, 0, value),))
                if feature not in seen:
                    seen.add(feature)
                    out.append(feature)
    return out


def _group_parents(fs: FeatureSet, group: NPlusGroup) -> list[CompoundFeature]:
    members = set(group.viewpoints)
    return [f for f in fs.features if f.viewpoints() & members]


def expand_backwards(
    fs: FeatureSet, spec: NPlusSpec, domains: dict, iteration: int
) -> list[CompoundFeature]:
    """Extend every matching compound with offset ``iteration + 1`` bases."""
    new_offset = iteration + 1
    return _extend(fs, spec, domains, lambda parent: new_offset)


def expand_continuous(
    fs: FeatureSet, spec: NPlusSpec, domains: dict
) -> list[CompoundFeature]:
    """Extend each compound one step beyond its own maximum offset."""
    return _extend(fs, spec, domains, lambda parent: parent.max_offset + 1)


def _extend(fs, spec, domains, offset_for) -> list[CompoundFeature]:
    existing = set(fs.features)
    out: list[CompoundFeature] = []
    for group in spec.groups:
        if not group.expand:
            continue
        for parent in _group_parents(fs, group):
            offset = offset_for(parent)
            for vp in group.viewpoints:
                for value in domains.get(vp, ()):
                    try:
                        cand = parent.with_basis(BasisFeature(vp, offset, value))
                    except FeatureError:
                        continue
                    if cand not in existing:
                        existing.add(cand)
                        out.append(cand)
    return out


def expand_forwards(
    fs: FeatureSet, spec: NPlusSpec, domains: dict
) -> list[CompoundFeature]:
    """Shift each compound one step into the past, then refill offset 0."""
    existing = set(fs.features)
    out: list[CompoundFeature] = []
    for group in spec.groups:
        if not group.expand:
            continue
        for parent in _group_parents(fs, group):
            try:
                shifted = parent.shifted(1)
            except FeatureError:
                continue  # anchored bases cannot move into the past
            for vp in group.viewpoints:
                for value in domains.get(vp, ()):
                    basis = BasisFeature(vp, 0, value)
                    try:
                        cand = shifted.with_basis(basis)
                    except FeatureError:
                        continue
                    if cand not in existing:
                        existing.add(cand)
                        out.append(cand)
    return out


@dataclass
class RoundLog:
    round_no: int
    objective: float
    n_features: int
    inner_epochs: int
    inner_reason: str
    validation_bits: float | None = None


@dataclass
class TrainedModel:
    """A converged (or flagged) feature set with everything needed to predict."""

    feature_set: FeatureSet
    alphabet: tuple[int, ...]
    nplus: NPlusSpec
    expansion: str
    regularization: RegularizationSpec
    key_profiles: KeyProfiles | None
    duration_weighted_key: bool
    provenance: dict[str, str] = field(default_factory=dict)
    converged: bool = True
    stop_reason: str = ""

    @property
    def features(self) -> list[CompoundFeature]:
        return self.feature_set.features

    @property
    def weights(self) -> np.ndarray:
        return self.feature_set.weights

    def key_settings(self) -> KeySettings | None:
        if self.key_profiles is None:
            return None
        return KeySettings(self.key_profiles, self.duration_weighted_key)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    def to_text(self) -> str:
        lines = ["melpulse-model 1"]
        lines.append(f"nplus: {self.nplus.to_text()}")
        lines.append(f"expansion: {self.expansion}")
        reg = self.regularization
        lines.append(
            "regularization: "
            f"kind={reg.kind} alpha={reg.alpha!r} l1={reg.l1!r} l2={reg.l2!r} "
            f"l2_kind={reg.l2_kind} l2_alpha={reg.l2_alpha!r} "
            f"l1_tau={'' if reg.l1_tau is None else repr(reg.l1_tau)} "
            f"l2_tau={'' if reg.l2_tau is None else repr(reg.l2_tau)}"
        )
        lines.append("alphabet: " + " ".join(str(p) for p in self.alphabet))
        if self.key_profiles is not None:
            profile = list(self.key_profiles.major) + list(self.key_profiles.minor)
            lines.append("key_profiles: " + " ".join(repr(v) for v in profile))
            lines.append(
                f"duration_weighted_key: {'true' if self.duration_weighted_key else 'false'}"
            )
        lines.append(f"converged: {'true' if self.converged else 'false'}")
        lines.append(f"stop_reason: {self.stop_reason}")
        for key in sorted(self.provenance):
            lines.append(f"meta {key}: {self.provenance[key]}")
        lines.append("features:")
        order = sorted(
            range(len(self.features)), key=lambda i: self.features[i].sort_key()
        )
        for i in order:
            lines.append(f"w={self.weights[i]!r} {self.features[i].to_text()}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def load(path: str | Path) -> "TrainedModel":
        return TrainedModel.from_text(Path(path).read_text(encoding="utf-8"))

    @staticmethod
    def from_text(text: str) -> "TrainedModel":
        lines = text.splitlines()
        if not lines or not lines[0].startswith("melpulse-model"):
            raise PulseError("not a model file")
        fields: dict[str, str] = {}
        provenance: dict[str, str] = {}
        features: list[CompoundFeature] = []
        weights: list[float] = []
        in_features = False
        for line in lines[1:]:
            if not line.strip():
                continue
            if line == "features:":
                in_features = True
                continue
            if in_features:
                w_part, _, f_part = line.partition(" ")
                weights.append(float(w_part.split("=", 1)[1]))
                features.append(CompoundFeature.from_text(f_part))
            elif line.startswith("meta "):
                key, _, value = line[5:].partition(":")
                provenance[key.strip()] = value.strip()
            else:
                key, _, value = line.partition(":")
                fields[key.strip()] = value.strip()

        reg_parts = dict(
            part.split("=", 1) for part in fields["regularization"].split()
        )
        reg = RegularizationSpec(
            kind=reg_parts["kind"],
            alpha=float(reg_parts["alpha"]),
            l1=float(reg_parts["l1"]),
            l2=float(reg_parts["l2"]),
            l2_kind=reg_parts.get("l2_kind", "constant"),
            l2_alpha=float(reg_parts.get("l2_alpha", 1.0)),
            l1_tau=float(reg_parts["l1_tau"]) if reg_parts.get("l1_tau") else None,
            l2_tau=float(reg_parts["l2_tau"]) if reg_parts.get("l2_tau") else None,
        )
        profiles = None
        if "key_profiles" in fields:
            values = [float(v) for v in fields["key_profiles"].split()]
            profiles = KeyProfiles(tuple(values[:12]), tuple(values[12:]))
        return TrainedModel(
            feature_set=FeatureSet(features, np.array(weights)),
            alphabet=tuple(int(p) for p in fields["alphabet"].split()),
            nplus=NPlusSpec.parse(fields["nplus"]),
            expansion=fields["expansion"],
            regularization=reg,
            key_profiles=profiles,
            duration_weighted_key=fields.get("duration_weighted_key", "true") == "true",
            provenance=provenance,
            converged=fields.get("converged", "true") == "true",
            stop_reason=fields.get("stop_reason", ""),
        )


class LtmPredictor:
    """Per-sequence distributions from a trained long-term model."""

    def __init__(self, model: TrainedModel, threads: int = 1):
        self.model = model
        self.threads = threads

    def predict_sequence(self, seq: EventSequence) -> list[PredictiveDistribution]:
        ctx = SequenceContext(seq, self.model.key_settings())
        data = [Datum(ctx, t) for t in range(len(seq))]
        matrix = build_matrix(
            data, self.model.features, self.model.alphabet, self.threads
        )
        probs = crf.predict_all(matrix, self.model.weights)
        return [PredictiveDistribution(row) for row in probs]


def _state_for_round(
    prev_state: opt.OptimizerState | None,
    fs: FeatureSet,
    prev_index: dict[CompoundFeature, int],
    config: opt.OptimizerConfig,
    use_hot_start: bool,
) -> opt.OptimizerState:
    if prev_state is None or not use_hot_start:
        state = opt.fresh_state(len(fs), config)
        state.theta = fs.weights.copy()
        return state
    old_indices = np.array(
        [prev_index.get(f, -1) for f in fs.features], dtype=np.int64
    )
    state = opt.hot_start(prev_state, old_indices, config)
    state.theta = fs.weights.copy()
    return state


def _shrink(fs: FeatureSet, state: opt.OptimizerState, config: opt.OptimizerConfig):
    keep = np.nonzero(state.theta != 0.0)[0]
    if keep.size == len(fs):
        return fs, state
    return fs.select(keep), opt.hot_start(state, keep, config)


@dataclass
class FitResult:
    model: TrainedModel
    rounds: list[RoundLog]


def fit_ltm(
    corpus: Corpus,
    nplus: NPlusSpec,
    regularization: RegularizationSpec,
    opt_config: opt.OptimizerConfig,
    inner_convergence: opt.ConvergenceConfig,
    outer: OuterConvergence,
    expansion: str = BACKWARDS,
    key_settings: KeySettings | None = None,
    use_hot_start: bool = True,
    seed: int = 0,
    threads: int = 1,
) -> FitResult:
    """Grow-optimize-shrink until the feature set converges.

    The iteration cap and the feature-count safety cap return the last
    complete model flagged ``converged=False`` instead of raising.
    """
    if expansion not in (BACKWARDS, CONTINUOUS, FORWARDS):
        raise PulseError(f"unknown expansion strategy {expansion!r}")
    if len(corpus.sequences) == 0:
        raise PulseError("training corpus is empty")

    validation: Corpus | None = None
    train_corpus = corpus
    if outer.criterion == CRITERION_VALIDATION:
        train_corpus, validation = split_validation(
            corpus, outer.validation_fraction, seed
        )

    data = corpus_data(train_corpus, key_settings)
    needed = nplus.viewpoints()
    domains = value_domains(data, needed)
    alphabet = corpus.alphabet
    n_train = len(data)

    fs = FeatureSet()
    state: opt.OptimizerState | None = None
    prev_features: set[CompoundFeature] | None = None
    prev_post_shrink = FeatureSet()
    expansion_counter = 0
    rounds: list[RoundLog] = []
    converged = False
    stop_reason = "round_cap"
    val_ema = None

    l1, l2 = regularization.strengths_at(None)
    run_config = opt_config.with_strengths(l1, l2, max(1, n_train))

    for round_no in range(1, outer.max_rounds + 1):
        if round_no == 1:
            candidates = init_features(nplus, domains)
        elif expansion == BACKWARDS:
            candidates = expand_backwards(fs, nplus, domains, expansion_counter)
            expansion_counter += 1
        elif expansion == CONTINUOUS:
            candidates = expand_continuous(fs, nplus, domains)
        else:
            candidates = expand_forwards(fs, nplus, domains)

        prev_index = fs.index()
        for cand in candidates:
            if cand not in prev_index:
                fs.add(cand, 0.0)

        matrix = build_matrix(data, fs.features, alphabet, threads)
        fs, matrix, _ = filter_irrelevant(fs, matrix)
        if len(fs) > outer.max_features:
            fs = prev_post_shrink
            stop_reason = "feature_cap"
            break

        run_state = _state_for_round(state, fs, prev_index, run_config, use_hot_start)
        round_config = replace(run_config, seed=seed + round_no)
        l1_factors = np.array(
            [per_feature_factor(f, regularization) for f in fs.features]
        )
        l2_factors = np.array(
            [l2_per_feature_factor(f, regularization) for f in fs.features]
        )

        def loss_grad(theta, batch, matrix=matrix):
            return crf.batch_loss_and_gradient(matrix, theta, batch)

        result = opt.run(
            loss_grad, n_train, round_config, inner_convergence, run_state,
            l1_factors, l2_factors,
        )
        fs.weights = result.theta
        objective = crf.objective(matrix, result.theta).nll

        fs, state = _shrink(fs, result.state, run_config)
        prev_post_shrink = fs

        log = RoundLog(round_no, objective, len(fs), result.epochs, result.reason)
        current = set(fs.features)
        if validation is not None:
            val_bits = _validation_bits(
                fs, alphabet, validation, key_settings, threads
            )
            log.validation_bits = val_bits
            prev_ema = val_ema
            val_ema = (
                val_bits
                if val_ema is None
                else outer.ema_decay * val_ema + (1 - outer.ema_decay) * val_bits
            )
        rounds.append(log)

        if prev_features is not None:
            size = max(1, len(current))
            if outer.criterion == CRITERION_FLUCTUATION:
                fluct = len(current ^ prev_features)
                if fluct < outer.tol * size:
                    converged = True
                    stop_reason = CRITERION_FLUCTUATION
            elif outer.criterion == CRITERION_SET_SIZE:
                if abs(len(current) - len(prev_features)) < outer.tol * size:
                    converged = True
                    stop_reason = CRITERION_SET_SIZE
            else:
                if prev_ema is not None and abs(val_ema - prev_ema) < outer.tol:
                    converged = True
                    stop_reason = CRITERION_VALIDATION
        prev_features = current
        if converged:
            break

    total_epochs = state.epoch_count if state is not None else 0
    model = TrainedModel(
        feature_set=fs,
        alphabet=alphabet,
        nplus=nplus,
        expansion=expansion,
        regularization=regularization,
        key_profiles=key_settings.profiles if key_settings else None,
        duration_weighted_key=key_settings.duration_weighted if key_settings else True,
        provenance={
            "corpus": corpus.content_hash(),
            "seed": str(seed),
            "rounds": str(len(rounds)),
            "epochs": str(total_epochs),
        },
        converged=converged,
        stop_reason=stop_reason,
    )
    return FitResult(model, rounds)


def _validation_bits(fs, alphabet, validation, key_settings, threads) -> float:
    data = corpus_data(validation, key_settings)
    matrix = build_matrix(data, fs.features, alphabet, threads)
    return crf.objective(matrix, fs.weights).nll / (len(data) * math.log(2))


@dataclass
class StmResult:
    distributions: list[PredictiveDistribution]
    feature_set: FeatureSet
    capped: bool = False


def fit_predict_stm(
    seq: EventSequence,
    alphabet: tuple[int, ...],
    nplus: NPlusSpec,
    regularization: RegularizationSpec,
    opt_config: opt.OptimizerConfig,
    inner_convergence: opt.ConvergenceConfig,
    expansion: str = FORWARDS,
    key_settings: KeySettings | None = None,
    max_features: int = 2000,
    use_hot_start: bool = True,
    seed: int = 0,
    threads: int = 1,
) -> StmResult:
    """Online fit within one piece, emitting a prediction before each event.

    Event t is predicted from the model trained on events 0..t-1 (uniform
    at t=0), then one grow-optimize-shrink round incorporates event t with
    the regularization strengths decayed to time t.  If the feature cap is
    hit, growth freezes but prediction and optimization continue; the
    result is flagged.
    """
    if expansion not in (CONTINUOUS, FORWARDS):
        raise PulseError("short-term expansion must be continuous or forwards")

    ctx = SequenceContext(seq, key_settings)
    data_all = [Datum(ctx, t) for t in range(len(seq))]
    needed = nplus.viewpoints()
    domains: dict[ViewpointId, list] = {vp: [] for vp in needed}
    domain_sets: dict[ViewpointId, set] = {vp: set() for vp in needed}

    fs = FeatureSet()
    state: opt.OptimizerState | None = None
    dists: list[PredictiveDistribution] = []
    capped = False

    for t in range(len(seq)):
        if len(fs) == 0:
            dists.append(PredictiveDistribution.uniform(len(alphabet)))
        else:
            matrix_t = build_matrix([data_all[t]], fs.features, alphabet, threads)
            dists.append(crf.predict(matrix_t, fs.weights, 0))

        for vp in needed:
            value = ctx.stream(vp)[t]
            if value is not None and value not in domain_sets[vp]:
                domain_sets[vp].add(value)
                domains[vp] = sorted(
                    domain_sets[vp], key=lambda v: value_sort_key(vp, v)
                )

        candidates = init_features(nplus, domains)
        if expansion == FORWARDS:
            candidates += expand_forwards(fs, nplus, domains)
        else:
            candidates += expand_continuous(fs, nplus, domains)

        prev_index = fs.index()
        if not capped:
            seen = set(fs.features)
            for cand in candidates:
                if cand not in seen:
                    seen.add(cand)
                    fs.add(cand, 0.0)

        data = data_all[: t + 1]
        matrix = build_matrix(data, fs.features, alphabet, threads)
        fs, matrix, _ = filter_irrelevant(fs, matrix)
        if len(fs) > max_features:
            capped = True

        l1, l2 = regularization.strengths_at(t)
        run_config = opt_config.with_strengths(l1, l2, t + 1)
        run_config = replace(run_config, seed=seed + t)
        run_state = _state_for_round(state, fs, prev_index, run_config, use_hot_start)
        l1_factors = np.array(
            [per_feature_factor(f, regularization) for f in fs.features]
        )
        l2_factors = np.array(
            [l2_per_feature_factor(f, regularization) for f in fs.features]
        )

        def loss_grad(theta, batch, matrix=matrix):
            return crf.batch_loss_and_gradient(matrix, theta, batch)

        result = opt.run(
            loss_grad, len(data), run_config, inner_convergence, run_state,
            l1_factors, l2_factors,
        )
        fs.weights = result.theta
        fs, state = _shrink(fs, result.state, run_config)

    return StmResult(dists, fs, capped)


class StmPredictor:
    """Fits a fresh short-term model per sequence and emits its predictions."""

    def __init__(
        self,
        alphabet: tuple[int, ...],
        nplus: NPlusSpec,
        regularization: RegularizationSpec,
        opt_config: opt.OptimizerConfig,
        inner_convergence: opt.ConvergenceConfig,
        expansion: str = FORWARDS,
        key_settings: KeySettings | None = None,
        max_features: int = 2000,
        seed: int = 0,
        threads: int = 1,
    ):
        self.alphabet = alphabet
        self.nplus = nplus
        self.regularization = regularization
        self.opt_config = opt_config
        self.inner_convergence = inner_convergence
        self.expansion = expansion
        self.key_settings = key_settings
        self.max_features = max_features
        self.seed = seed
        self.threads = threads

    def predict_sequence(self, seq: EventSequence) -> list[PredictiveDistribution]:
        return fit_predict_stm(
            seq,
            self.alphabet,
            self.nplus,
            self.regularization,
            self.opt_config,
            self.inner_convergence,
            expansion=self.expansion,
            key_settings=self.key_settings,
            max_features=self.max_features,
            seed=self.seed,
            threads=self.threads,
        ).distributions
