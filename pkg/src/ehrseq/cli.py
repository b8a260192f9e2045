"""End-to-end pipeline as composable subcommands.

    ehrseq synth      --config run.toml --seed N   -> data CSVs + ground truth
    ehrseq preprocess --config run.toml            -> cleaned events + drop report
    ehrseq cohort     --config run.toml            -> cohort NDJSON + summary + split
    ehrseq train      --config run.toml --seed N   -> tokenizer + checkpoints + histories
    ehrseq evaluate   --config run.toml            -> report JSON/Markdown + figures
    ehrseq compare    --config run.toml --reports ... -> comparison JSON/Markdown

Exit codes: 2 input/config, 3 cohort too small, 4 training divergence,
5 artifact mismatch, 6 comparison mismatch.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import cohort as cohort_mod
from . import figures
from . import ingest
from . import model as model_mod
from . import ontology
from . import synthgen
from .evaluation import (
    BootstrapCI,
    MetricReport,
    PredictionSet,
    WindowReport,
    compare_reports,
    evaluate_predictions,
    render_class_table,
    render_comparison_table,
)
from .sequence import (
    Mode,
    SerializedRecord,
    Tokenizer,
    TruncationSide,
    encode,
    serialize,
    token_length_stats,
    train_tokenizer,
)

EXIT_INPUT = 2
EXIT_COHORT = 3
EXIT_TRAINING = 4
EXIT_ARTIFACT = 5
EXIT_COMPARISON = 6


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    seed: int = 0
    mode: Mode = Mode.TEXT
    windows: tuple[int, ...] = (1, 5, 10)
    max_len: int = 512
    truncation_side: TruncationSide = TruncationSide.LEFT
    stratify_window: Optional[int] = None
    output_dir: Path = Path("out")
    vocab_path: Optional[Path] = None
    codelists_path: Optional[Path] = None
    patients_path: Optional[Path] = None
    events_path: Optional[Path] = None
    synth: dict = field(default_factory=dict)
    tokenizer_vocab_size: int = 1024
    encoder: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    n_boot: int = 1000
    m_comparisons: int = 18
    threshold: float = 0.5

    def __post_init__(self) -> None:
        if not self.windows:
            raise CliError(EXIT_INPUT, "windows must be non-empty")
        if self.stratify_window is None:
            self.stratify_window = max(self.windows)

    # default data-file locations under output_dir/data
    def path(self, name: str) -> Path:
        explicit = getattr(self, f"{name}_path")
        if explicit is not None:
            return explicit
        filename = {
            "vocab": "vocab.tsv",
            "codelists": "codelists.tsv",
            "patients": "patients.csv",
            "events": "events.csv",
        }[name]
        return self.output_dir / "data" / filename

    @property
    def work_dir(self) -> Path:
        return self.output_dir / "work"

    @property
    def models_dir(self) -> Path:
        return self.output_dir / "models"

    @property
    def reports_dir(self) -> Path:
        return self.output_dir / "reports"

    @property
    def figures_dir(self) -> Path:
        return self.output_dir / "figures"

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        paths = data.get("paths", {})
        eval_section = data.get("eval", {})

        def maybe_path(key: str) -> Optional[Path]:
            return Path(paths[key]) if key in paths else None

        try:
            return cls(
                seed=int(data.get("seed", 0)),
                mode=Mode(str(data.get("mode", "TEXT")).upper()),
                windows=tuple(int(w) for w in data.get("windows", (1, 5, 10))),
                max_len=int(data.get("max_len", 512)),
                truncation_side=TruncationSide(
                    str(data.get("truncation_side", "LEFT")).upper()
                ),
                stratify_window=(
                    int(data["stratify_window"]) if "stratify_window" in data else None
                ),
                output_dir=Path(paths.get("output_dir", "out")),
                vocab_path=maybe_path("vocab"),
                codelists_path=maybe_path("codelists"),
                patients_path=maybe_path("patients"),
                events_path=maybe_path("events"),
                synth=dict(data.get("synth", {})),
                tokenizer_vocab_size=int(
                    data.get("tokenizer", {}).get("target_vocab_size", 1024)
                ),
                encoder=dict(data.get("encoder", {})),
                train=dict(data.get("train", {})),
                n_boot=int(eval_section.get("n_boot", 1000)),
                m_comparisons=int(eval_section.get("m_comparisons", 18)),
                threshold=float(eval_section.get("threshold", 0.5)),
            )
        except (ValueError, KeyError) as exc:
            raise CliError(EXIT_INPUT, f"bad run config: {exc}") from exc

    @classmethod
    def from_file(cls, path: Path) -> "RunConfig":
        try:
            text = path.read_bytes()
        except OSError as exc:
            raise CliError(EXIT_INPUT, f"cannot read config: {exc}") from exc
        if path.suffix.lower() == ".json":
            data = json.loads(text.decode("utf-8"))
        else:
            try:
                import tomllib  # python >= 3.11
            except ModuleNotFoundError:
                import tomli as tomllib
            data = tomllib.loads(text.decode("utf-8"))
        return cls.from_dict(data)


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise CliError(EXIT_INPUT, f"{what} not found: {path}")
    return path


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _generator_config(config: RunConfig, seed: int) -> synthgen.GeneratorConfig:
    data = dict(config.synth)
    data["seed"] = seed
    try:
        return synthgen.GeneratorConfig.from_dict(data)
    except (synthgen.InvalidConfig, TypeError, ValueError, KeyError) as exc:
        raise CliError(EXIT_INPUT, f"bad synth config: {exc}") from exc


def cmd_synth(config: RunConfig, seed: int) -> None:
    gen_config = _generator_config(config, seed)
    cohort = synthgen.generate(gen_config)
    data_dir = config.output_dir / "data"
    paths = synthgen.write_cohort_files(cohort, data_dir)
    _write_json(
        data_dir / "synth_config.json",
        {"config": gen_config.to_dict(), "config_hash": cohort.config_hash},
    )
    print(f"synth: {len(cohort.patients)} patients, {len(cohort.events)} events")
    for name, p in sorted(paths.items()):
        print(f"  {name}: {p}")


def cmd_preprocess(config: RunConfig) -> None:
    patients_path = _require(config.path("patients"), "patients file")
    events_path = _require(config.path("events"), "events file")
    try:
        patients, bad_patients = ingest.parse_patients(patients_path)
        events, bad_events = ingest.parse_events(events_path)
    except (ingest.SchemaMismatch, ingest.UnreadableStream) as exc:
        raise CliError(EXIT_INPUT, str(exc)) from exc
    by_patient: dict[str, list[ingest.ClinicalEvent]] = {}
    for event in events:
        by_patient.setdefault(event.patient_id, []).append(event)
    reports = []
    cleaned: list[ingest.ClinicalEvent] = []
    for patient in sorted(patients, key=lambda p: p.id):
        kept, report = ingest.clean_events(patient, by_patient.get(patient.id, []))
        reports.append(report)
        cleaned.extend(ingest.sort_chronologically(kept))
    merged = ingest.DropReport.merged(reports)
    config.work_dir.mkdir(parents=True, exist_ok=True)
    out_events = config.work_dir / "cleaned_events.ndjson"
    with out_events.open("w", encoding="utf-8") as fh:
        ingest.write_events_ndjson(cleaned, fh)
    _write_json(
        config.work_dir / "drop_report.json",
        {
            **merged.to_dict(),
            "malformed_event_rows": bad_events,
            "malformed_patient_rows": bad_patients,
        },
    )
    print(
        f"preprocess: kept {merged.kept_count}/{merged.input_count} events "
        f"({bad_events} malformed rows)"
    )


def cmd_cohort(config: RunConfig) -> None:
    patients_path = _require(config.path("patients"), "patients file")
    codelists_path = _require(config.path("codelists"), "codelists file")
    cleaned_path = _require(config.work_dir / "cleaned_events.ndjson", "cleaned events")
    patients, _ = ingest.parse_patients(patients_path)
    events, _ = ingest.parse_events(cleaned_path, fmt="ndjson")
    with codelists_path.open("r", encoding="utf-8") as fh:
        codelists = ontology.load_codelist(fh)
    by_patient: dict[str, list[ingest.ClinicalEvent]] = {}
    for event in events:
        by_patient.setdefault(event.patient_id, []).append(event)
    try:
        examples, phenotypes, tally = cohort_mod.build_cohort(
            patients, by_patient, codelists, config.windows
        )
    except cohort_mod.MissingCodelist as exc:
        raise CliError(EXIT_INPUT, str(exc)) from exc
    if len(examples) < 10:
        raise CliError(EXIT_COHORT, f"accepted cohort too small: {len(examples)}")
    split = cohort_mod.stratified_split(
        examples, stratify_window=config.stratify_window, seed=config.seed
    )
    with (config.work_dir / "cohort.ndjson").open("w", encoding="utf-8") as fh:
        cohort_mod.write_cohort_ndjson(examples, fh)
    summary = cohort_mod.cohort_summary(
        examples, phenotypes, {p.id: p for p in patients}, tally
    )
    _write_json(config.work_dir / "cohort_summary.json", summary)
    _write_json(config.work_dir / "splits.json", split.to_dict())
    print(
        f"cohort: accepted {tally.accepted}/{tally.total} patients; "
        f"split {len(split.train)}/{len(split.validation)}/{len(split.test)}"
    )


def _load_cohort(config: RunConfig) -> tuple[list, cohort_mod.SplitAssignment]:
    cohort_path = _require(config.work_dir / "cohort.ndjson", "cohort file")
    splits_path = _require(config.work_dir / "splits.json", "split assignment")
    with cohort_path.open("r", encoding="utf-8") as fh:
        examples = cohort_mod.read_cohort_ndjson(fh)
    data = json.loads(splits_path.read_text(encoding="utf-8"))
    split = cohort_mod.SplitAssignment(
        train=data["train"], validation=data["validation"], test=data["test"], seed=data["seed"]
    )
    return examples, split


def _serialized_records(config: RunConfig, examples) -> dict[str, SerializedRecord]:
    vocab = None
    if config.mode is Mode.TEXT and config.path("vocab").exists():
        with config.path("vocab").open("r", encoding="utf-8") as fh:
            vocab, _ = ontology.load_vocab(fh)
    return {
        ex.patient_id: serialize(ex.input_events, config.mode, vocab) for ex in examples
    }


def _encode_split(
    records: dict[str, SerializedRecord],
    labels_by_id: dict[str, dict[int, tuple[int, int, int]]],
    ids: Sequence[str],
    tok: Tokenizer,
    config: RunConfig,
    window: int,
) -> model_mod.SplitData:
    encoded = [encode(tok, records[i], config.max_len, config.truncation_side) for i in ids]
    token_ids = np.stack([seq.ids for seq in encoded])
    masks = np.stack([seq.mask for seq in encoded])
    labels = np.array([labels_by_id[i][window] for i in ids], dtype=np.int64)
    return model_mod.SplitData(ids=token_ids, mask=masks, labels=labels)


def _encode_all(
    records: dict[str, SerializedRecord],
    examples,
    split: cohort_mod.SplitAssignment,
    tok: Tokenizer,
    config: RunConfig,
    window: int,
) -> model_mod.EncodedSplits:
    labels_by_id = {ex.patient_id: ex.labels for ex in examples}
    return model_mod.EncodedSplits(
        train=_encode_split(records, labels_by_id, split.train, tok, config, window),
        validation=_encode_split(records, labels_by_id, split.validation, tok, config, window),
        test=_encode_split(records, labels_by_id, split.test, tok, config, window),
    )


def _train_config(config: RunConfig, seed: int) -> model_mod.TrainConfig:
    section = dict(config.train)
    if "lr_candidates" in section:
        section["lr_candidates"] = tuple(float(lr) for lr in section["lr_candidates"])
    section.setdefault("threshold", config.threshold)
    section["seed"] = seed
    try:
        return model_mod.TrainConfig(**section)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_INPUT, f"bad train config: {exc}") from exc


def _encoder_config(config: RunConfig, vocab_size: int, seed: int) -> model_mod.EncoderConfig:
    section = dict(config.encoder)
    try:
        return model_mod.EncoderConfig(
            vocab_size=vocab_size, max_len=config.max_len, seed=seed, **section
        )
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_INPUT, f"bad encoder config: {exc}") from exc


def _mode_tag(config: RunConfig) -> str:
    return config.mode.value.lower()


def cmd_train(config: RunConfig, seed: int) -> None:
    examples, split = _load_cohort(config)
    records = _serialized_records(config, examples)
    tag = _mode_tag(config)
    config.work_dir.mkdir(parents=True, exist_ok=True)
    config.models_dir.mkdir(parents=True, exist_ok=True)
    config.figures_dir.mkdir(parents=True, exist_ok=True)

    train_bodies = [records[i].body for i in split.train]
    tok = train_tokenizer(train_bodies, config.tokenizer_vocab_size)
    tok.save(config.work_dir / f"tokenizer_{tag}.txt")

    train_corpus = [records[i] for i in split.train]
    stats = token_length_stats(
        train_corpus,
        tok,
        config.max_len,
        histogram_path=config.work_dir / f"token_hist_{tag}.csv",
    )
    _write_json(config.work_dir / f"token_stats_{tag}.json", stats.to_dict())
    figures.save_token_length_histogram(
        stats, config.figures_dir / f"token_lengths_{tag}.png"
    )

    tc = _train_config(config, seed)
    meta: dict = {"mode": tag, "tokenizer_hash": tok.content_hash(), "windows": {}}
    for window in config.windows:
        splits = _encode_all(records, examples, split, tok, config, window)
        try:
            weights = model_mod.compute_label_weights(splits.train.labels)
            window_tc = replace(tc, label_weights=tuple(weights))
            best_lr, search_histories = model_mod.lr_search(
                splits, _encoder_config(config, len(tok), seed), window_tc
            )
            final_model = model_mod.ClassifierModel(
                _encoder_config(config, len(tok), seed)
            )
            final_model, history = model_mod.train(final_model, splits, window_tc, best_lr)
        except model_mod.TrainingDiverged as exc:
            raise CliError(EXIT_TRAINING, str(exc)) from exc
        except model_mod.ModelError as exc:
            raise CliError(EXIT_INPUT, str(exc)) from exc
        checksum = model_mod.save_checkpoint(
            final_model, config.models_dir / f"ckpt_{tag}_w{window}.bin"
        )
        with (config.models_dir / f"history_{tag}_w{window}.csv").open(
            "w", encoding="utf-8"
        ) as fh:
            history.write_csv(fh)
        figures.save_training_curves(
            history, config.figures_dir / f"history_{tag}_w{window}.png"
        )
        np.savez_compressed(
            config.work_dir / f"encoded_{tag}_w{window}.npz",
            train_ids=splits.train.ids,
            train_mask=splits.train.mask,
            train_labels=splits.train.labels,
            validation_ids=splits.validation.ids,
            validation_mask=splits.validation.mask,
            validation_labels=splits.validation.labels,
            test_ids=splits.test.ids,
            test_mask=splits.test.mask,
            test_labels=splits.test.labels,
        )
        meta["windows"][str(window)] = {
            "chosen_lr": best_lr,
            "label_weights": [float(w) for w in weights],
            "checkpoint_sha256": checksum,
            "stopped_at_step": history.stopped_at_step,
            "best_val_micro_f1": history.best_val_micro_f1,
            "search": {
                f"{lr:g}": h.best_val_micro_f1 for lr, h in search_histories.items()
            },
        }
        print(
            f"train[{tag} w{window}]: lr={best_lr:g}, "
            f"best val micro-F1={history.best_val_micro_f1:.4f}, "
            f"stopped at {history.stopped_at_step}"
        )
    _write_json(config.models_dir / f"train_meta_{tag}.json", meta)


def cmd_evaluate(config: RunConfig) -> None:
    examples, split = _load_cohort(config)
    tag = _mode_tag(config)
    tok_path = _require(config.work_dir / f"tokenizer_{tag}.txt", "tokenizer")
    tok = Tokenizer.load(tok_path)
    records = _serialized_records(config, examples)
    labels_by_id = {ex.patient_id: ex.labels for ex in examples}
    config.reports_dir.mkdir(parents=True, exist_ok=True)
    config.figures_dir.mkdir(parents=True, exist_ok=True)
    reports: list[WindowReport] = []
    for window in config.windows:
        ckpt_path = _require(
            config.models_dir / f"ckpt_{tag}_w{window}.bin", "checkpoint"
        )
        model = model_mod.load_checkpoint(ckpt_path)
        if model.config.max_len != config.max_len:
            raise CliError(
                EXIT_ARTIFACT,
                f"checkpoint max_len {model.config.max_len} != config {config.max_len}",
            )
        if model.config.vocab_size != len(tok):
            raise CliError(
                EXIT_ARTIFACT,
                f"checkpoint vocab {model.config.vocab_size} != tokenizer {len(tok)}",
            )
        test = _encode_split(records, labels_by_id, split.test, tok, config, window)
        probs = model_mod.batched_predict_proba(model, test)
        pred = PredictionSet(probs, test.labels, window_years=window, model_tag=tag)
        report = evaluate_predictions(
            pred, threshold=config.threshold, n_boot=config.n_boot, seed=config.seed
        )
        reports.append(report)
        _write_json(config.reports_dir / f"report_{tag}_w{window}.json", report.to_dict())
        print(
            f"evaluate[{tag} w{window}]: micro-F1={report.report.micro_f1:.4f}, "
            f"micro-AUPRC={report.report.micro_auprc:.4f}"
        )
    (config.reports_dir / f"report_{tag}.md").write_text(
        render_class_table(reports), encoding="utf-8"
    )
    figures.save_metric_bars(reports, config.figures_dir / f"metrics_{tag}.png")


def _load_window_report(path: Path) -> WindowReport:
    data = json.loads(path.read_text(encoding="utf-8"))
    metrics = data["metrics"]
    report = MetricReport(
        micro_f1=metrics["micro_f1"],
        micro_recall=metrics["micro_recall"],
        micro_auprc=metrics["micro_auprc"],
        per_class={
            name: (v["f1"], v["recall"]) for name, v in metrics["per_class"].items()
        },
        threshold=metrics["threshold"],
        degenerate=tuple(metrics.get("degenerate", ())),
    )
    intervals = {
        name: BootstrapCI(**ci) for name, ci in data["intervals"].items()
    }
    return WindowReport(
        model_tag=data["model_tag"],
        window_years=data["window_years"],
        report=report,
        intervals=intervals,
    )


def cmd_compare(config: RunConfig, report_paths: Sequence[Path], m: Optional[int]) -> None:
    m_comparisons = m if m is not None else config.m_comparisons
    by_tag: dict[str, list[WindowReport]] = {}
    for path in report_paths:
        report = _load_window_report(_require(Path(path), "report"))
        by_tag.setdefault(report.model_tag, []).append(report)
    tags = sorted(by_tag)
    if len(tags) < 2:
        raise CliError(EXIT_INPUT, "need reports from at least two model tags")
    rows: list[dict] = []
    tables: list[str] = []
    for i, tag_a in enumerate(tags):
        for tag_b in tags[i + 1 :]:
            try:
                pair_rows = compare_reports(by_tag[tag_a], by_tag[tag_b], m_comparisons)
            except ValueError as exc:
                raise CliError(EXIT_COMPARISON, str(exc)) from exc
            rows.extend(pair_rows)
            tables.append(
                render_comparison_table(by_tag[tag_a], by_tag[tag_b], pair_rows)
            )
    config.reports_dir.mkdir(parents=True, exist_ok=True)
    _write_json(
        config.reports_dir / "comparison.json",
        {"m_comparisons": m_comparisons, "comparisons": rows},
    )
    (config.reports_dir / "comparison.md").write_text(
        "\n".join(tables), encoding="utf-8"
    )
    n_sig = sum(1 for r in rows if r["significant"])
    print(f"compare: {len(rows)} tests, {n_sig} significant at alpha/m={0.05/m_comparisons:.5f}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ehrseq", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser, seed_required: bool = False) -> None:
        p.add_argument("--config", type=Path, required=True, help="run config (TOML or JSON)")
        p.add_argument("--out", type=Path, help="override output directory")
        p.add_argument("--mode", choices=["TEXT", "CODE"], help="override serialization mode")
        p.add_argument("--windows", help="override prediction windows, e.g. 1,5,10")
        p.add_argument("--max-len", type=int, dest="max_len", help="override max token length")
        p.add_argument(
            "--truncation-side",
            choices=["LEFT", "RIGHT"],
            dest="truncation_side",
            help="override truncation side",
        )
        p.add_argument(
            "--seed", type=int, required=seed_required, help="random seed"
        )

    p_synth = sub.add_parser("synth", help="generate synthetic data files")
    add_common(p_synth, seed_required=True)
    p_synth.add_argument("--n", type=int, help="override number of patients")

    p_pre = sub.add_parser("preprocess", help="parse, clean and sort raw events")
    add_common(p_pre)

    p_cohort = sub.add_parser("cohort", help="build the labeled cohort and split")
    add_common(p_cohort)

    p_train = sub.add_parser("train", help="train tokenizer and per-window models")
    add_common(p_train, seed_required=True)

    p_eval = sub.add_parser("evaluate", help="test-set metrics with bootstrap CIs")
    add_common(p_eval)

    p_cmp = sub.add_parser("compare", help="pairwise significance tests between reports")
    add_common(p_cmp)
    p_cmp.add_argument("--reports", nargs="+", type=Path, required=True)
    p_cmp.add_argument("--m", type=int, help="number of simultaneous comparisons")

    return parser


def _apply_overrides(config: RunConfig, args: argparse.Namespace) -> RunConfig:
    if getattr(args, "out", None) is not None:
        config.output_dir = args.out
    if getattr(args, "mode", None) is not None:
        config.mode = Mode(args.mode)
    if getattr(args, "windows", None):
        config.windows = tuple(int(w) for w in str(args.windows).split(","))
        config.stratify_window = max(config.windows)
    if getattr(args, "max_len", None) is not None:
        config.max_len = args.max_len
    if getattr(args, "truncation_side", None) is not None:
        config.truncation_side = TruncationSide(args.truncation_side)
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    if getattr(args, "n", None) is not None:
        config.synth["n_patients"] = args.n
    return config


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _apply_overrides(RunConfig.from_file(args.config), args)
        if args.command == "synth":
            cmd_synth(config, args.seed)
        elif args.command == "preprocess":
            cmd_preprocess(config)
        elif args.command == "cohort":
            cmd_cohort(config)
        elif args.command == "train":
            cmd_train(config, args.seed)
        elif args.command == "evaluate":
            cmd_evaluate(config)
        elif args.command == "compare":
            cmd_compare(config, args.reports, args.m)
    except CliError as exc:
        print(f"ehrseq {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except (ontology.OntologyError, ingest.IngestError) as exc:
        print(f"ehrseq {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return 0


if __name__ == "__main__":
    sys.exit(main())
