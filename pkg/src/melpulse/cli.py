"""Command-line surface: training, evaluation, generation and reports.

Subcommands: ingest-check, train-ltm, stm-eval, cv, hybrid, generate,
analyze, grid-search.  A single YAML config document drives every run;
unknown keys are rejected and all defaults are the tuned values baked into
the library.  Every command honors ``--seed`` and ``--threads`` (the
``PULSE_SEQ_THREADS`` environment variable caps workers); fixing both
makes outputs byte-identical across reruns.

Exit codes: 0 success, 2 usage/config errors, 3 non-convergence.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import itertools
import math
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import corpus as corpus_mod
from . import ensemble, evalgen, pulse
from .corpus import Corpus, CorpusError, ingest, load_folds, split_folds, train_test_split
from .features import KeySettings
from .optimizer import ConvergenceConfig, OptimizerConfig
from .pulse import (
    LtmPredictor,
    NPlusSpec,
    OuterConvergence,
    PulseError,
    RegularizationSpec,
    StmPredictor,
    TrainedModel,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NOT_CONVERGED = 3

THREADS_ENV = "PULSE_SEQ_THREADS"

LTM_DEFAULT_NPLUS = "P I* C* K M_K"
STM_DEFAULT_NPLUS = "P I* F1"


class ConfigError(ValueError):
    """Raised for unknown keys or invalid values in a run config."""


@dataclass(frozen=True)
class FoldsSection:
    file: str | None = None
    k: int = 10
    seed: int = 0


@dataclass(frozen=True)
class KeySection:
    profiles: str | None = None
    duration_weighted: bool = True


@dataclass(frozen=True)
class StmSection:
    nplus: str = STM_DEFAULT_NPLUS
    expansion: str = pulse.FORWARDS
    regularization: RegularizationSpec = RegularizationSpec(
        kind="exponential", alpha=1.2, l1=1e-5, l2=0.01, l1_tau=100.0, l2_tau=8.0
    )
    max_features: int = 2000


@dataclass(frozen=True)
class GenerationSection:
    method: str = evalgen.BEAM
    beams: int = 5
    threshold: float = 0.65
    length: int = 32
    prime: tuple[int, ...] = ()
    restarts: int = 10


@dataclass(frozen=True)
class CombinationSection:
    rule: str = ensemble.SUM_RULE
    bias_grid: tuple[float, ...] = tuple(float(b) for b in ensemble.BIAS_GRID)


@dataclass(frozen=True)
class GridSection:
    params: dict = field(default_factory=dict)  # name -> list of values
    random_params: dict = field(default_factory=dict)  # name -> [lo, hi]
    count: int = 0
    seed: int = 0
    validation_fraction: float = 0.1


@dataclass(frozen=True)
class RunConfig:
    corpus: str | None = None
    output_dir: str = "out"
    seed: int = 0
    threads: int = 1
    nplus: str = LTM_DEFAULT_NPLUS
    expansion: str = pulse.BACKWARDS
    optimizer: OptimizerConfig = OptimizerConfig()
    regularization: RegularizationSpec = RegularizationSpec()
    convergence: ConvergenceConfig = ConvergenceConfig()
    outer: OuterConvergence = OuterConvergence()
    key: KeySection = KeySection()
    folds: FoldsSection = FoldsSection()
    stm: StmSection = StmSection()
    generation: GenerationSection = GenerationSection()
    combination: CombinationSection = CombinationSection()
    grid: GridSection = GridSection()


_SECTION_TYPES = {
    "optimizer": OptimizerConfig,
    "regularization": RegularizationSpec,
    "convergence": ConvergenceConfig,
    "outer": OuterConvergence,
    "key": KeySection,
    "folds": FoldsSection,
    "stm": StmSection,
    "generation": GenerationSection,
    "combination": CombinationSection,
    "grid": GridSection,
}

_TUPLE_FIELDS = {"prime", "bias_grid"}


def _build_section(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for key, value in data.items():
        if key == "regularization" and isinstance(value, dict):
            value = _build_section(RegularizationSpec, value, f"{where}.{key}")
        elif key in _TUPLE_FIELDS and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError, PulseError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    data = {}
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError("config root must be a mapping")
        data = loaded
    top_names = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(data) - top_names)
    if unknown:
        raise ConfigError(f"config: unknown keys {unknown}")
    kwargs = {}
    for key, value in data.items():
        if key in _SECTION_TYPES:
            kwargs[key] = _build_section(_SECTION_TYPES[key], value, key)
        else:
            kwargs[key] = value
    try:
        config = RunConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    for name, value in (overrides or {}).items():
        if value is not None:
            config = replace(config, **{name: value})
    return config


def apply_param(config: RunConfig, dotted: str, value) -> RunConfig:
    """Override one config value by dotted path (e.g. regularization.l1)."""
    if "." not in dotted:
        if dotted not in {f.name for f in dataclasses.fields(RunConfig)}:
            raise ConfigError(f"unknown parameter {dotted!r}")
        return replace(config, **{dotted: value})
    section_name, _, fname = dotted.partition(".")
    section = getattr(config, section_name, None)
    if section is None or not dataclasses.is_dataclass(section):
        raise ConfigError(f"unknown parameter section {section_name!r}")
    if fname not in {f.name for f in dataclasses.fields(section)}:
        raise ConfigError(f"unknown parameter {dotted!r}")
    try:
        return replace(config, **{section_name: replace(section, **{fname: value})})
    except (ValueError, PulseError) as exc:
        raise ConfigError(f"{dotted}: {exc}") from exc


def _effective_threads(config: RunConfig) -> int:
    threads = max(1, config.threads)
    cap = os.environ.get(THREADS_ENV)
    if cap:
        threads = min(threads, max(1, int(cap)))
    return threads


def _key_settings(config: RunConfig) -> KeySettings:
    from .viewpoints import load_key_profiles

    profiles = load_key_profiles(config.key.profiles)
    return KeySettings(profiles, config.key.duration_weighted)


def _needs_key(nplus_text: str) -> bool:
    from .viewpoints import KEYED

    spec = NPlusSpec.parse(nplus_text)
    return any(vp in KEYED for vp in spec.viewpoints())


def _outdir(config: RunConfig) -> Path:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(x) for x in row])


def _cell(x):
    if isinstance(x, float):
        return repr(x)
    return x


def _fit_ltm_from_config(config: RunConfig, corpus: Corpus, threads: int):
    key_settings = _key_settings(config) if _needs_key(config.nplus) else None
    return pulse.fit_ltm(
        corpus,
        NPlusSpec.parse(config.nplus),
        config.regularization,
        config.optimizer,
        config.convergence,
        config.outer,
        expansion=config.expansion,
        key_settings=key_settings,
        seed=config.seed,
        threads=threads,
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_ingest_check(config: RunConfig) -> int:
    corpus = ingest(_require_corpus(config))
    print(
        f"sequences={len(corpus)} events={corpus.n_events} "
        f"alphabet={len(corpus.alphabet)}"
    )
    return EXIT_OK


def _require_corpus(config: RunConfig) -> str:
    if not config.corpus:
        raise ConfigError("no corpus path configured")
    if not Path(config.corpus).exists():
        raise ConfigError(f"corpus file not found: {config.corpus}")
    return config.corpus


def cmd_train_ltm(config: RunConfig) -> int:
    corpus = ingest(_require_corpus(config))
    threads = _effective_threads(config)
    result = _fit_ltm_from_config(config, corpus, threads)
    out = _outdir(config)
    result.model.save(out / "model.txt")
    _write_csv(
        out / "training_log.csv",
        ["round", "objective", "n_features", "inner_epochs", "inner_reason",
         "validation_bits"],
        [
            [r.round_no, r.objective, r.n_features, r.inner_epochs, r.inner_reason,
             "" if r.validation_bits is None else r.validation_bits]
            for r in result.rounds
        ],
    )
    print(
        f"model: {out / 'model.txt'} features={len(result.model.features)} "
        f"converged={result.model.converged} reason={result.model.stop_reason}"
    )
    return EXIT_OK if result.model.converged else EXIT_NOT_CONVERGED


def _resolve_folds(config: RunConfig, corpus: Corpus):
    if config.folds.file:
        folds = load_folds(config.folds.file)
        folds.validate_against(corpus)
        return folds
    return split_folds(corpus, config.folds.k, config.folds.seed)


def _grid_points(config: RunConfig) -> list[dict]:
    grid = config.grid
    if grid.params:
        names = sorted(grid.params)
        combos = itertools.product(*(grid.params[name] for name in names))
        return [dict(zip(names, combo)) for combo in combos]
    if grid.random_params:
        if grid.count < 1:
            raise ConfigError("grid.count must be >= 1 for random search")
        rng = np.random.default_rng(grid.seed)
        names = sorted(grid.random_params)
        points = []
        for _ in range(grid.count):
            point = {}
            for name in names:
                lo, hi = grid.random_params[name]
                if lo <= 0 or hi <= lo:
                    raise ConfigError(f"grid bounds for {name} must satisfy 0 < lo < hi")
                point[name] = float(
                    10 ** rng.uniform(math.log10(lo), math.log10(hi))
                )
            points.append(point)
        return points
    return []


def _evaluate_grid_point(payload) -> tuple[int, dict, float]:
    index, config, point, train_corpus = payload
    for name, value in point.items():
        config = apply_param(config, name, value)
    train, validation = corpus_mod.split_validation(
        train_corpus, config.grid.validation_fraction, config.seed
    )
    result = _fit_ltm_from_config(config, train, threads=1)
    predictor = LtmPredictor(result.model)
    report = evalgen.cross_entropy(predictor, validation)
    return index, point, report.dataset_bits


def _run_grid(config: RunConfig, train_corpus: Corpus, threads: int):
    points = _grid_points(config)
    if not points:
        return None, []
    payloads = [(i, config, point, train_corpus) for i, point in enumerate(points)]
    if threads > 1 and len(points) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_evaluate_grid_point, payloads))
    else:
        results = [_evaluate_grid_point(p) for p in payloads]
    results.sort(key=lambda r: r[0])
    best = min(results, key=lambda r: (r[2], r[0]))
    return best, results


def cmd_grid_search(config: RunConfig) -> int:
    corpus = ingest(_require_corpus(config))
    threads = _effective_threads(config)
    best, results = _run_grid(config, corpus, threads)
    if best is None:
        raise ConfigError("grid section declares no points")
    out = _outdir(config)
    names = sorted(results[0][1]) if results else []
    _write_csv(
        out / "grid_trace.csv",
        ["index"] + names + ["validation_bits"],
        [[idx] + [point[n] for n in names] + [bits] for idx, point, bits in results],
    )
    best_config = config
    for name, value in best[1].items():
        best_config = apply_param(best_config, name, value)
    best_doc = {name: best[1][name] for name in sorted(best[1])}
    (out / "best_config.yaml").write_text(
        yaml.safe_dump({"best_params": best_doc, "validation_bits": best[2]},
                       sort_keys=True),
        encoding="utf-8",
    )
    print(f"best: {best_doc} validation_bits={best[2]:.4f}")
    return EXIT_OK


def _cv_fold_worker(payload):
    fold, config, corpus, assignment = payload
    folds = corpus_mod.FoldAssignment(assignment[0], assignment[1])
    train, test = train_test_split(corpus, folds, fold)
    if config.grid.params or config.grid.random_params:
        best, _ = _run_grid(config, train, threads=1)
        for name, value in best[1].items():
            config = apply_param(config, name, value)
    result = _fit_ltm_from_config(config, train, threads=1)
    predictor = LtmPredictor(result.model)
    report = evalgen.cross_entropy(predictor, test)
    return fold, report.dataset_bits, report.accuracy, report.n_events, (
        result.model.converged
    ), result.model.to_text()


def cmd_cv(config: RunConfig) -> int:
    corpus = ingest(_require_corpus(config))
    folds = _resolve_folds(config, corpus)
    threads = _effective_threads(config)
    payloads = [
        (fold, config, corpus, (folds.k, folds.assignment))
        for fold in range(folds.k)
    ]
    if threads > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_cv_fold_worker, payloads))
    else:
        results = [_cv_fold_worker(p) for p in payloads]
    results.sort(key=lambda r: r[0])

    out = _outdir(config)
    rows = []
    all_converged = True
    total_bits = 0.0
    total_acc = 0.0
    total_events = 0
    for fold, bits, acc, n_events, converged, model_text in results:
        rows.append([fold, bits, acc, n_events, converged])
        (out / f"fold_{fold}_model.txt").write_text(model_text, encoding="utf-8")
        total_bits += bits * n_events
        total_acc += acc * n_events
        total_events += n_events
        all_converged = all_converged and converged
    aggregate_bits = total_bits / total_events
    rows.append(["mean", aggregate_bits, total_acc / total_events, total_events,
                 all_converged])
    _write_csv(
        out / "cv_report.csv",
        ["fold", "bits", "accuracy", "n_events", "converged"],
        rows,
    )
    print(f"cv mean bits={aggregate_bits:.4f} over {folds.k} folds")
    return EXIT_OK if all_converged else EXIT_NOT_CONVERGED


def _stm_predictor(config: RunConfig, alphabet, seed: int) -> StmPredictor:
    stm = config.stm
    key_settings = _key_settings(config) if _needs_key(stm.nplus) else None
    return StmPredictor(
        alphabet,
        NPlusSpec.parse(stm.nplus),
        stm.regularization,
        config.optimizer,
        config.convergence,
        expansion=stm.expansion,
        key_settings=key_settings,
        max_features=stm.max_features,
        seed=seed,
    )


def _stm_sequence_worker(payload):
    index, config, seq, alphabet = payload
    predictor = _stm_predictor(config, alphabet, config.seed)
    dists = predictor.predict_sequence(seq)
    idx = {p: i for i, p in enumerate(alphabet)}
    bits = [
        -math.log2(d.probs[idx[ev.pitch]]) if d.probs[idx[ev.pitch]] > 0 else math.inf
        for d, ev in zip(dists, seq.events)
    ]
    hits = sum(
        1 for d, ev in zip(dists, seq.events) if d.argmax_lowest() == idx[ev.pitch]
    )
    return index, seq.id, sum(bits), hits, len(seq)


def cmd_stm_eval(config: RunConfig) -> int:
    corpus = ingest(_require_corpus(config))
    threads = _effective_threads(config)
    payloads = [
        (i, config, seq, corpus.alphabet) for i, seq in enumerate(corpus.sequences)
    ]
    if threads > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_stm_sequence_worker, payloads))
    else:
        results = [_stm_sequence_worker(p) for p in payloads]
    results.sort(key=lambda r: r[0])
    out = _outdir(config)
    rows = [
        [seq_id, bits_sum / n, hits / n, n] for _, seq_id, bits_sum, hits, n in results
    ]
    total_events = sum(r[4] for r in results)
    mean_bits = sum(r[2] for r in results) / total_events
    accuracy = sum(r[3] for r in results) / total_events
    rows.append(["mean", mean_bits, accuracy, total_events])
    _write_csv(out / "stm_report.csv", ["sequence", "bits", "accuracy", "n_events"], rows)
    print(f"stm mean bits={mean_bits:.4f} over {total_events} events")
    return EXIT_OK


def _load_source(spec_text: str, config: RunConfig, corpus: Corpus, train: Corpus):
    """A prediction source: model file, distribution CSV, 'stm', or 'ngram:N'."""
    if spec_text == "stm":
        return _stm_predictor(config, corpus.alphabet, config.seed)
    if spec_text.startswith("ngram:"):
        order = int(spec_text.split(":", 1)[1])
        model = ensemble.NGramModel(order, corpus.alphabet).fit(train)
        return ensemble.NGramPredictor(model)
    path = Path(spec_text)
    if not path.exists():
        raise ConfigError(f"source not found: {spec_text}")
    head = path.read_text(encoding="utf-8").splitlines()
    if head and head[0].startswith("melpulse-model"):
        model = TrainedModel.load(path)
        if tuple(model.alphabet) != tuple(corpus.alphabet):
            raise ConfigError("model alphabet does not match the corpus alphabet")
        return LtmPredictor(model)
    return ensemble.StoredDistributions.load(path, corpus)


def cmd_hybrid(config: RunConfig, ltm_source: str, stm_source: str, test_fold: int) -> int:
    corpus = ingest(_require_corpus(config))
    folds = _resolve_folds(config, corpus)
    train, test = train_test_split(corpus, folds, test_fold)
    sources = [
        _load_source(ltm_source, config, corpus, train),
        _load_source(stm_source, config, corpus, train),
    ]
    rule = config.combination.rule
    best_bias, trace = ensemble.select_bias(
        sources, train, rule, config.combination.bias_grid
    )
    hybrid = ensemble.HybridPredictor(
        sources, ensemble.CombinationConfig(rule, best_bias)
    )
    reports = {
        "source_1": evalgen.cross_entropy(sources[0], test),
        "source_2": evalgen.cross_entropy(sources[1], test),
        "hybrid": evalgen.cross_entropy(hybrid, test),
    }
    out = _outdir(config)
    rows = [
        [name, rep.dataset_bits, rep.accuracy, rep.n_events]
        for name, rep in reports.items()
    ]
    _write_csv(
        out / "hybrid_report.csv", ["model", "bits", "accuracy", "n_events"], rows
    )
    _write_csv(
        out / "bias_trace.csv", ["bias", "train_bits"],
        [[b, bits] for b, bits in trace],
    )
    print(
        f"hybrid bits={reports['hybrid'].dataset_bits:.4f} "
        f"(sources {reports['source_1'].dataset_bits:.4f} / "
        f"{reports['source_2'].dataset_bits:.4f}, rule={rule}, b={best_bias})"
    )
    return EXIT_OK


def cmd_generate(config: RunConfig, model_path: str) -> int:
    model = TrainedModel.load(model_path)
    gen = config.generation
    for pitch in gen.prime:
        if pitch not in model.alphabet:
            raise ConfigError(f"prime pitch {pitch} outside the model alphabet")
    cfg = evalgen.GenerationConfig(
        method=gen.method,
        beams=gen.beams,
        threshold=gen.threshold,
        length=gen.length,
        prime=tuple(gen.prime),
        restarts=gen.restarts,
        seed=config.seed,
    )
    result = evalgen.generate(model, cfg)
    out = _outdir(config)
    seq = result.to_sequence("generated")
    corpus_mod.save(Corpus((seq,), model.alphabet), out / "generated.txt")
    _write_csv(
        out / "generation_report.csv",
        ["method", "mean_bits", "length", "prime_length", "seed"],
        [[gen.method, result.mean_bits, gen.length, len(gen.prime), config.seed]],
    )
    print(f"generated {gen.length} events at {result.mean_bits:.4f} bits/event")
    return EXIT_OK


def cmd_analyze(config: RunConfig, model_path: str) -> int:
    model = TrainedModel.load(model_path)
    report = evalgen.analyze(model)
    out = _outdir(config)
    _write_csv(
        out / "analysis_types.csv",
        ["type", "weight_share"],
        [[k, v] for k, v in sorted(report.type_weight_share.items())],
    )
    zero_rows = []
    for tag in sorted(report.zero_order_weights):
        for value, weight in report.zero_order_weights[tag]:
            zero_rows.append([tag, value, weight])
    _write_csv(out / "analysis_zero_order.csv", ["type", "value", "weight"], zero_rows)
    _write_csv(
        out / "analysis_motifs.csv",
        ["length", "intervals", "weight"],
        [
            [length, text, weight]
            for length, (text, weight) in sorted(report.top_motifs.items())
        ],
    )
    _write_csv(
        out / "analysis_extent.csv",
        ["offset", "compound_length", "abs_weight"],
        [[o, l, w] for (o, l), w in sorted(report.extent_histogram.items())],
    )
    _write_csv(
        out / "analysis_holes.csv",
        ["compound_length", "holes", "count"],
        [[l, h, c] for (l, h), c in sorted(report.holes_histogram.items())],
    )
    print(f"analysis written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="melpulse",
        description="Feature-discovery melody models: train, evaluate, generate.",
    )
    parser.add_argument("--config", help="YAML run configuration")
    parser.add_argument("--corpus", help="corpus file (overrides config)")
    parser.add_argument("--output-dir", help="report/model output directory")
    parser.add_argument("--seed", type=int, help="global random seed")
    parser.add_argument("--threads", type=int, help="worker processes/threads")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("ingest-check", help="parse a corpus and print a summary")
    sub.add_parser("train-ltm", help="train a long-term model")
    sub.add_parser("cv", help="k-fold cross-validation of the long-term model")
    sub.add_parser("stm-eval", help="online short-term model evaluation")
    hybrid = sub.add_parser("hybrid", help="combine two prediction sources")
    hybrid.add_argument("--ltm", required=True,
                        help="model file, distribution CSV, or ngram:N")
    hybrid.add_argument("--stm", required=True,
                        help="model file, distribution CSV, 'stm', or ngram:N")
    hybrid.add_argument("--test-fold", type=int, default=0)
    generate = sub.add_parser("generate", help="decode a sequence from a model")
    generate.add_argument("--model", required=True)
    analyze = sub.add_parser("analyze", help="structural reports for a model file")
    analyze.add_argument("--model", required=True)
    sub.add_parser("grid-search", help="hyperparameter search on a validation split")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(
            args.config,
            {
                "corpus": args.corpus,
                "output_dir": args.output_dir,
                "seed": args.seed,
                "threads": args.threads,
            },
        )
        if args.command == "ingest-check":
            return cmd_ingest_check(config)
        if args.command == "train-ltm":
            return cmd_train_ltm(config)
        if args.command == "cv":
            return cmd_cv(config)
        if args.command == "stm-eval":
            return cmd_stm_eval(config)
        if args.command == "hybrid":
            return cmd_hybrid(config, args.ltm, args.stm, args.test_fold)
        if args.command == "generate":
            return cmd_generate(config, args.model)
        if args.command == "analyze":
            return cmd_analyze(config, args.model)
        if args.command == "grid-search":
            return cmd_grid_search(config)
        parser.error(f"unknown command {args.command}")
    except (ConfigError, CorpusError, PulseError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
