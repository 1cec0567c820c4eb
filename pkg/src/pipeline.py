"""One function per CLI command: prepare, label, train, score, fit-mapping, evaluate.

Each command reads its inputs from the run's work directory, writes its outputs there and
leaves a provenance record under <work_dir>/provenance/<command>.json.
"""
import logging
from pathlib import Path
from typing import Optional

import pandas as pd

from src.config import CorpusConfig, RunConfig
from src.corpus import (
    FfmpegTranscoder,
    Manifest,
    Transcoder,
    calibrate_codec_delay,
    discover_sources,
    prepare_corpus,
    read_clip,
    read_manifest,
    resample,
    write_manifest,
)
from src.encoder import build_encoder, load_checkpoint
from src.errors import LabelingError, PreconditionError, ValidationError
from src.evalreport import (
    compare_metrics,
    evaluate,
    export_scatter,
    load_predictions,
    load_tests,
    matched_rows,
    render_comparison,
    write_report,
)
from src.provenance import config_hash, file_sha256, tree_lock, write_provenance
from src.scorer import (
    MappingSet,
    fit_cubic,
    fit_mlp,
    load_mapping,
    load_reference_set,
    save_mapping,
    score_items,
)
from src.surrogate import LabelCache, label_manifest, make_client
from src.toycorpus import ToyTranscoder
from src.trainer import train

logger = logging.getLogger(__name__)

ADHOC_TEST = "adhoc"


# --- run layout ---

def provenance_path(cfg: RunConfig, command: str) -> Path:
    return cfg.paths.work_dir / "provenance" / f"{command}.json"


def predictions_path(cfg: RunConfig) -> Path:
    return cfg.paths.work_dir / "predictions.csv"


def mapping_path(cfg: RunConfig) -> Path:
    return cfg.scoring.mapping or cfg.paths.work_dir / "mapping.json"


def checkpoint_path(cfg: RunConfig) -> Path:
    return cfg.scoring.checkpoint or cfg.paths.checkpoints / "best.pt"


def report_dir(cfg: RunConfig) -> Path:
    return cfg.paths.work_dir / "report"


def make_transcoder(cfg: CorpusConfig) -> Transcoder:
    if cfg.transcoder.kind == "toy":
        return ToyTranscoder(cfg.ladder)
    return FfmpegTranscoder(cfg.transcoder, cfg.ladder)


# --- commands ---

def cmd_prepare(cfg: RunConfig, overrides: list[str]) -> Manifest:
    """Segment sources, encode the ladder, resample and split into a manifest."""
    # 1. Find source recordings
    sources = discover_sources(cfg.paths.sources)
    if not sources:
        raise ValidationError(f"no .wav sources in {cfg.paths.sources}")
    logger.info("found %d source recordings in %s", len(sources), cfg.paths.sources)

    # 2. Transcoder, with per-codec delays measured once if asked
    transcoder = make_transcoder(cfg.corpus)
    if cfg.corpus.calibrate_delay:
        rate = read_clip(sources[0].path).sample_rate
        for codec in cfg.corpus.codecs:
            transcoder.delays[codec] = calibrate_codec_delay(
                transcoder, codec, max(cfg.corpus.ladder), rate, seed=cfg.seed,
            )

    # 3. Build the tree and manifest under the single-writer lock
    with tree_lock(cfg.paths.corpus_dir):
        manifest, warnings = prepare_corpus(sources, cfg.corpus, transcoder, cfg.paths.corpus_dir, cfg.seed, cfg.jobs)
        write_manifest(manifest, cfg.paths.manifest)

    write_provenance(
        provenance_path(cfg, "prepare"), "prepare", cfg, overrides,
        inputs={f"source:{s.source_id}": s.path for s in sources},
        extra={"outputs": {"manifest": file_sha256(cfg.paths.manifest)}, "transcoder": transcoder.version,
               "codec_delays": dict(sorted(transcoder.delays.items())), "warnings": warnings},
    )
    return manifest


def cmd_label(cfg: RunConfig, overrides: list[str]) -> Manifest:
    """Fill surrogate MOS labels; clean clips get 5.0 without calling the tool."""
    manifest = read_manifest(cfg.paths.manifest)
    client = make_client(cfg.surrogate, manifest.metadata.ladder)
    cache = LabelCache(cfg.surrogate.cache_dir or cfg.paths.work_dir / "label_cache")

    with tree_lock(cfg.paths.corpus_dir):
        labeled, failures = label_manifest(manifest, client, cache, cfg.jobs)
        write_manifest(labeled, cfg.paths.manifest)

    write_provenance(
        provenance_path(cfg, "label"), "label", cfg, overrides,
        inputs={"manifest": cfg.paths.manifest},
        extra={"labeler": client.version, "failures": len(failures)},
    )
    if failures:
        raise LabelingError(f"{len(failures)} clips could not be labeled; first: {failures[0][0]}: {failures[0][1]}")
    return labeled


def cmd_train(cfg: RunConfig, overrides: list[str]):
    manifest = read_manifest(cfg.paths.manifest)
    manifest.validate(check_files=True)
    result = train(manifest, cfg)
    write_provenance(
        provenance_path(cfg, "train"), "train", cfg, overrides,
        inputs={"manifest": cfg.paths.manifest},
        extra={
            "outputs": {
                "best": file_sha256(result.best_checkpoint),
                "last": file_sha256(result.last_checkpoint),
                "metrics": file_sha256(cfg.paths.metrics_log),
            },
            "initial_val_loss": result.initial_val_loss,
            "best_val_loss": result.best_val_loss,
        },
    )
    return result


def _scoring_model(cfg: RunConfig):
    if cfg.scoring.mode == "fad":
        # FAD runs on the frozen pretrained backbone.
        return build_encoder(cfg.encoder, cfg.seed), None
    path = checkpoint_path(cfg)
    if not Path(path).is_file():
        raise PreconditionError(f"checkpoint not found: {path} (run `train` first)")
    model, _ = load_checkpoint(path, cfg.encoder, cfg.seed)
    return model, path


def _reference_clips(cfg: RunConfig, sample_rate: int):
    if cfg.scoring.reference_list is None:
        raise PreconditionError(f"scoring mode {cfg.scoring.mode} needs scoring.reference_list")
    paths = load_reference_set(cfg.scoring.reference_list)
    missing = [str(p) for p in paths if not p.is_file()]
    if missing:
        raise ValidationError(f"{len(missing)} reference files are missing, e.g. {missing[0]}")
    return [resample(read_clip(p, source_id=p.stem), sample_rate) for p in paths]


def cmd_score(cfg: RunConfig, overrides: list[str], pair: Optional[tuple[str, str]] = None) -> pd.DataFrame:
    """Score an ad-hoc test file, or every row of the configured listening tests."""
    model, ckpt = _scoring_model(cfg)
    rate = model.backbone.sample_rate
    mapping_file = mapping_path(cfg)
    mappings = None
    if cfg.scoring.mode != "fad" and Path(mapping_file).is_file():
        mappings = load_mapping(mapping_file)
        logger.info("applying %s mapping from %s", mappings.scope, mapping_file)

    if pair is not None:
        tests = []
        items = pd.DataFrame([{"item_id": Path(pair[0]).stem, "test": ADHOC_TEST, "condition": "",
                               "test_path": str(pair[0]), "reference_path": pair[1]}])
        if mappings is not None and mappings.scope != "global":
            logger.warning("%s mapping has no entry for ad-hoc items; reporting the raw distance", mappings.scope)
            mappings = None
    else:
        tests = load_tests(cfg.evaluation.registry, cfg.evaluation.tests or None)
        items = pd.concat([t.rows for t in tests], ignore_index=True)
    references = _reference_clips(cfg, rate) if cfg.scoring.mode != "full_reference" else None
    predictions = score_items(items, model, cfg.scoring, mappings, references)

    outputs = {}
    if pair is None:
        out = predictions_path(cfg)
        out.parent.mkdir(parents=True, exist_ok=True)
        predictions.to_csv(out, index=False, float_format="%.10g")
        outputs["predictions"] = file_sha256(out)
    else:
        row = predictions.iloc[0]
        mapped = None if pd.isna(row["mapped_score"]) else float(row["mapped_score"])
        outputs["adhoc"] = {"distance": float(row["distance"]), "mapped_score": mapped, "mode": row["mode"]}
    inputs = {"checkpoint": ckpt, "mapping": mapping_file if mappings else None, "references": cfg.scoring.reference_list,
              **{f"test:{t.name}": t.path for t in tests}}
    if pair is not None:
        inputs.update({"test_file": pair[0], "reference_file": pair[1]})
    command = "score" if pair is None else "score-adhoc"
    write_provenance(provenance_path(cfg, command), command, cfg, overrides, inputs=inputs, extra={"outputs": outputs})
    return predictions


def cmd_fit_mapping(cfg: RunConfig, overrides: list[str]) -> MappingSet:
    """Fit distance → subjective mappings on the calibration tests only."""
    mcfg = cfg.mapping
    names = mcfg.calibration_tests or cfg.evaluation.tests or None
    if not mcfg.calibration_tests:
        logger.warning("mapping.calibration_tests is empty; fitting on the evaluation tests themselves")
    tests = load_tests(cfg.evaluation.registry, names)
    wrong_scale = [t.name for t in tests if t.scale != mcfg.scale]
    if wrong_scale:
        raise ValidationError(f"tests {wrong_scale} are not on the {mcfg.scale} scale of the mapping")

    predictions = pd.read_csv(predictions_path(cfg), dtype={"item_id": str, "condition": str, "test": str})
    predictions["prediction"] = predictions["distance"]
    rows = matched_rows(predictions, tests, cfg.evaluation.grouping)

    def fit(part: pd.DataFrame):
        if mcfg.kind == "cubic":
            return fit_cubic(part["prediction"], part["subjective"], mcfg.bounds)
        return fit_mlp(part["prediction"], part["subjective"], mcfg.bounds, cfg.seed,
                       mcfg.mlp_hidden, mcfg.mlp_epochs, mcfg.mlp_lr)

    if mcfg.scope == "global":
        mapping_set = MappingSet("global", {"global": fit(rows)})
    else:
        mapping_set = MappingSet("per_test", {name: fit(part) for name, part in rows.groupby("test", sort=True)})
    for key, m in mapping_set.mappings.items():
        logger.info("%s %s mapping: residual MSE %.4g on %d points", key, m.kind, m.residual_mse, m.n_points)

    out = save_mapping(mapping_path(cfg), mapping_set)
    write_provenance(
        provenance_path(cfg, "fit-mapping"), "fit-mapping", cfg, overrides,
        inputs={"predictions": predictions_path(cfg), **{f"test:{t.name}": t.path for t in tests}},
        extra={"outputs": {"mapping": file_sha256(out)}},
    )
    return mapping_set


def cmd_evaluate(cfg: RunConfig, overrides: list[str]) -> dict:
    """Correlation report for our predictions and each external metric, plus scatter exports."""
    tests = load_tests(cfg.evaluation.registry, cfg.evaluation.tests or None)
    grouping = cfg.evaluation.grouping
    sources = {"tonerank": predictions_path(cfg), **cfg.evaluation.external_predictions}

    ckpt = checkpoint_path(cfg)
    metadata = {
        "config_hash": config_hash(cfg),
        "scoring_mode": cfg.scoring.mode,
        "checkpoint_sha256": file_sha256(ckpt) if Path(ckpt).is_file() else None,
        "mapping": None,
    }
    if Path(mapping_path(cfg)).is_file():
        mapping_set = load_mapping(mapping_path(cfg))
        metadata["mapping"] = {
            "scope": mapping_set.scope,
            "kinds": sorted({m.kind for m in mapping_set.mappings.values()}),
            "calibration": {k: m.calibration_hash for k, m in sorted(mapping_set.mappings.items())},
        }

    out_dir = report_dir(cfg)
    reports = {}
    for metric, path in sources.items():
        predictions = load_predictions(path, metric)
        report = evaluate(predictions, tests, grouping, {**metadata, "metric": metric,
                                                        "predictions_sha256": file_sha256(path)})
        write_report(report, out_dir, f"report_{metric}")
        export_scatter(predictions, tests, out_dir / f"scatter_{metric}.csv", grouping)
        reports[metric] = report

    if len(reports) > 1:
        (out_dir / "comparison.txt").write_text(render_comparison(compare_metrics(reports)), encoding="utf-8")

    write_provenance(
        provenance_path(cfg, "evaluate"), "evaluate", cfg, overrides,
        inputs={**{f"predictions:{m}": p for m, p in sources.items()}, **{f"test:{t.name}": t.path for t in tests}},
    )
    return reports
