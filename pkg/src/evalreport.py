"""Listening-test ingestion and PCC/SRCC evaluation of predictions against subjective scores."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from src.config import SCALES
from src.errors import CoverageError, ValidationError
from src.metrics import clean_value, correlation_summary, linear_regression

logger = logging.getLogger(__name__)

KEYS = ["test", "item_id", "condition"]
REQUIRED_COLUMNS = ["item_id", "condition", "test_path"]
OVERALL = "Overall"
ALL_TESTS = "ALL"


@dataclass
class ListeningTest:
    name: str
    scale: str
    rows: pd.DataFrame
    subgroups: list[str] = field(default_factory=list)
    path: Optional[Path] = None
    category: str = ""


def load_listening_test(path, name: str, scale: str, subgroups: Optional[list[str]] = None,
                        category: str = "") -> ListeningTest:
    """Read a listening-test CSV; listener_* columns are averaged into `subjective`."""
    path = Path(path)
    try:
        df = pd.read_csv(path, dtype={"item_id": str, "condition": str})
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ValidationError(f"cannot read listening test {path}: {e}") from e

    missing = [c for c in REQUIRED_COLUMNS if c not in df.columns]
    listener_cols = sorted(c for c in df.columns if c.startswith("listener_"))
    if "subjective" not in df.columns:
        if not listener_cols:
            raise ValidationError(f"{path}: needs a 'subjective' column or listener_* columns")
        df["subjective"] = df[listener_cols].mean(axis=1)
    if missing:
        raise ValidationError(f"{path}: missing columns {missing}")

    dupes = df[df.duplicated(["item_id", "condition"], keep=False)]
    if not dupes.empty:
        pairs = sorted(set(zip(dupes["item_id"], dupes["condition"])))
        raise ValidationError(f"{path}: duplicate (item_id, condition) rows {pairs[:10]}")

    lo, hi = SCALES[scale]
    bad = df[(df["subjective"] < lo) | (df["subjective"] > hi) | df["subjective"].isna()]
    if not bad.empty:
        raise ValidationError(f"{path}: {len(bad)} subjective scores outside the {scale} scale [{lo}, {hi}]")

    root = path.parent
    df["test_path"] = [str(root / p) for p in df["test_path"]]
    if "reference_path" in df.columns:
        df["reference_path"] = [str(root / p) if isinstance(p, str) else None for p in df["reference_path"]]
    else:
        df["reference_path"] = None
    df["subgroup"] = df["subgroup"].fillna("").astype(str) if "subgroup" in df.columns else ""
    df["test"] = name
    cols = ["test", "item_id", "condition", "subjective", "subgroup", "test_path", "reference_path"]
    return ListeningTest(name, scale, df[cols].reset_index(drop=True), list(subgroups or []), path, category)


def load_registry(path) -> dict:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ValidationError(f"cannot read listening-test registry {path}: {e}") from e


def registry_path_of(registry_file, entry: dict) -> Path:
    return Path(registry_file).parent / entry["category"] / entry["filename"]


def load_tests(registry_file, names: Optional[list[str]] = None) -> list[ListeningTest]:
    """Load the named tests (default: every registry test whose file is present)."""
    registry = load_registry(registry_file)
    entries = {t["id"]: t for t in registry["tests"]}
    unknown = sorted(set(names or []) - set(entries))
    if unknown:
        raise ValidationError(f"tests {unknown} are not in the registry {registry_file}")

    tests = []
    for test_id, entry in sorted(entries.items()):
        path = registry_path_of(registry_file, entry)
        if names:
            if test_id not in names:
                continue
            if not path.is_file():
                raise ValidationError(f"listening test {test_id}: file not found at {path}")
        elif not path.is_file():
            continue
        tests.append(load_listening_test(path, test_id, entry["scale"], entry.get("subgroups"), entry.get("category", "")))
    if not tests:
        raise ValidationError(f"no listening-test files found for registry {registry_file}")
    return tests


def load_predictions(path, metric: Optional[str] = None) -> pd.DataFrame:
    """Prediction CSV -> (test, item_id, condition, prediction).

    Our own files carry distance/mapped_score; external metrics carry a `score` column.
    Without a mapping, the negated distance is the prediction.
    """
    path = Path(path)
    try:
        df = pd.read_csv(path, dtype={"item_id": str, "condition": str, "test": str})
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ValidationError(f"cannot read predictions {path}: {e}") from e
    missing = [c for c in KEYS if c not in df.columns]
    if missing:
        raise ValidationError(f"{path}: missing columns {missing}")

    if "score" in df.columns:
        df["prediction"] = df["score"].astype(float)
    elif "mapped_score" in df.columns and df["mapped_score"].notna().all():
        df["prediction"] = df["mapped_score"].astype(float)
    elif "distance" in df.columns:
        df["prediction"] = -df["distance"].astype(float)
    else:
        raise ValidationError(f"{path}: needs a score, mapped_score or distance column")
    df["metric"] = metric or path.stem
    return df[KEYS + ["prediction", "metric"]]


@dataclass
class CorrelationReport:
    rows: list[dict]
    metadata: dict = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=["test", "subgroup", "pcc", "srcc", "n_items"])

    def to_json(self) -> dict:
        return {"metadata": self.metadata, "rows": self.rows}


def matched_rows(predictions: pd.DataFrame, tests: list[ListeningTest], grouping: str = "per_item") -> pd.DataFrame:
    """Join predictions to subjective scores; every test row must have a prediction."""
    subjective = pd.concat([t.rows for t in tests], ignore_index=True)
    merged = subjective.merge(predictions[KEYS + ["prediction"]], on=KEYS, how="left")
    unmatched = merged[merged["prediction"].isna()]
    if not unmatched.empty:
        raise CoverageError([f"{r.test}/{r.item_id}/{r.condition}" for r in unmatched.itertuples()])
    merged = merged.sort_values(KEYS, kind="mergesort").reset_index(drop=True)
    if grouping == "per_condition":
        merged = (
            merged.groupby(["test", "condition", "subgroup"], as_index=False, sort=True)
            .agg(subjective=("subjective", "mean"), prediction=("prediction", "mean"))
        )
    elif grouping != "per_item":
        raise ValidationError(f"unknown grouping {grouping!r}")
    return merged


def evaluate(predictions: pd.DataFrame, tests: list[ListeningTest], grouping: str = "per_item",
             metadata: Optional[dict] = None) -> CorrelationReport:
    """PCC/SRCC per test (Overall + each subgroup), per registry category, and over all tests."""
    rows = matched_rows(predictions, tests, grouping)
    out = []
    for test in sorted(t.name for t in tests):
        part = rows[rows["test"] == test]
        out.append({"test": test, "subgroup": OVERALL, **correlation_summary(part["prediction"], part["subjective"])})
        for subgroup in sorted(s for s in part["subgroup"].unique() if s):
            sub = part[part["subgroup"] == subgroup]
            out.append({"test": test, "subgroup": subgroup, **correlation_summary(sub["prediction"], sub["subjective"])})
    categories: dict[str, list[str]] = {}
    for t in tests:
        if t.category:
            categories.setdefault(t.category, []).append(t.name)
    for category, names in sorted(categories.items()):
        if len(names) > 1:
            part = rows[rows["test"].isin(names)]
            out.append({"test": category, "subgroup": OVERALL, **correlation_summary(part["prediction"], part["subjective"])})
    if len(tests) > 1:
        out.append({"test": ALL_TESTS, "subgroup": OVERALL, **correlation_summary(rows["prediction"], rows["subjective"])})
    meta = dict(metadata or {})
    meta["grouping"] = grouping
    return CorrelationReport(out, meta)


def export_scatter(predictions: pd.DataFrame, tests: list[ListeningTest], path,
                   grouping: str = "per_item") -> tuple[Path, Path]:
    """Write scatter points and per-test regression lines as CSV next to each other."""
    rows = matched_rows(predictions, tests, grouping)
    for t in tests:
        present = set(rows.loc[rows["test"] == t.name, "subgroup"])
        for subgroup in t.subgroups:
            if subgroup not in present:
                logger.warning("test %s: subgroup %r has no rows; omitted from the export", t.name, subgroup)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    points = rows[["prediction", "subjective", "test", "subgroup"]].rename(columns={"test": "test_name"})
    points.to_csv(path, index=False, float_format="%.10g")

    lines = []
    for test in sorted(rows["test"].unique()):
        part = rows[rows["test"] == test]
        slope, intercept = linear_regression(part["prediction"], part["subjective"])
        lines.append({"test_name": test, "slope": clean_value(slope), "intercept": clean_value(intercept), "n": len(part)})
    regression_path = path.with_name(path.stem + "_regression.csv")
    pd.DataFrame(lines, columns=["test_name", "slope", "intercept", "n"]).to_csv(
        regression_path, index=False, float_format="%.10g"
    )
    return path, regression_path


def _fmt(value) -> str:
    return "  null" if value is None else f"{value:6.3f}"


def render_report(report: CorrelationReport) -> str:
    lines = [
        "=" * 70,
        "ToneRank correlation report",
        "=" * 70,
    ]
    for key in sorted(report.metadata):
        lines.append(f"{key}: {report.metadata[key]}")
    lines += ["", f"{'test':<24}{'subgroup':<16}{'PCC':>8}{'SRCC':>8}{'n':>8}", "-" * 64]
    for r in report.rows:
        lines.append(f"{r['test']:<24}{r['subgroup']:<16}{_fmt(r['pcc']):>8}{_fmt(r['srcc']):>8}{r['n_items']:>8}")
    return "\n".join(lines) + "\n"


def write_report(report: CorrelationReport, out_dir, name: str = "report") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    text_path, json_path = out_dir / f"{name}.txt", out_dir / f"{name}.json"
    text_path.write_text(render_report(report), encoding="utf-8")
    json_path.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True), encoding="utf-8")
    return text_path, json_path


def compare_metrics(reports: dict[str, CorrelationReport]) -> pd.DataFrame:
    """Side-by-side table: rows (test, subgroup), columns <metric>_PCC / <metric>_SRCC."""
    table: Optional[pd.DataFrame] = None
    for metric in reports:
        frame = reports[metric].to_frame()[["test", "subgroup", "pcc", "srcc"]]
        frame = frame.rename(columns={"pcc": f"{metric}_PCC", "srcc": f"{metric}_SRCC"})
        table = frame if table is None else table.merge(frame, on=["test", "subgroup"], how="outer")
    if table is None:
        return pd.DataFrame(columns=["test", "subgroup"])
    return table.sort_values(["test", "subgroup"], kind="mergesort").reset_index(drop=True)


def render_comparison(table: pd.DataFrame) -> str:
    return table.to_string(index=False, float_format=lambda v: f"{v:.3f}", na_rep="null") + "\n"
