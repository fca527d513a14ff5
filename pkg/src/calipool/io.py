"""CSV ingestion, report emission, and run manifests.

The dataset schema is one row per subject with columns
``study_id, stratum_id, subject_id, is_case, local_w, ref_x,
in_calibration_subset`` and optionally ``effect_modifier``, followed by any
number of numeric covariate columns.  Empty fields are missing values.
Studies where no subject has a local measurement are treated as
reference-laboratory studies.

Human-readable tables and summary CSVs print floats at six significant
digits so report files diff cleanly; per-replicate record files keep full
precision so aggregate metrics can be reproduced exactly from them.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .aggregate import AggregatedEstimate
from .data import (
    DesignSpec,
    LabKind,
    PooledDataset,
    Stratum,
    Study,
    Subject,
    validate,
)
from .errors import DataError
from .methods import PoolingMethod
from .simulate import (
    CalibrationBiasResult,
    CalibrationSizeResult,
    OperatingCharacteristics,
    ReplicateRecord,
    ScenarioMain,
    WALD_Z,
)
from .twostage import MetaResult

REQUIRED_COLUMNS = (
    "study_id",
    "stratum_id",
    "subject_id",
    "is_case",
    "local_w",
    "ref_x",
    "in_calibration_subset",
)
OPTIONAL_MODIFIER = "effect_modifier"


def _fmt(x) -> str:
    """Six significant digits for report output."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, float) and x != x:
        return "nan"
    return f"{float(x):.6g}"


def _full(x) -> str:
    """Shortest round-trip representation for machine records."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    return repr(float(x))


def _parse_float(raw: str, line: int, column: str) -> float | None:
    raw = raw.strip()
    if raw == "":
        return None
    try:
        return float(raw)
    except ValueError:
        raise DataError(f"line {line}: column {column!r} has malformed number {raw!r}") from None


def _parse_flag(raw: str, line: int, column: str) -> bool:
    raw = raw.strip()
    if raw in ("0", "1"):
        return raw == "1"
    raise DataError(f"line {line}: column {column!r} must be 0 or 1, got {raw!r}")


def ingest_csv(
    path: str | Path,
    include_interaction: bool = False,
    exposure_scale: float = 1.0,
) -> PooledDataset:
    """Parse and validate a subject-level CSV into a pooled dataset.

    Raises :class:`DataError` with line-numbered diagnostics for malformed
    values, duplicate keys, or invariant violations.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        if header is None:
            raise DataError(f"{path}: empty file, header required")
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise DataError(f"{path}: missing required columns {missing}")
        has_modifier = OPTIONAL_MODIFIER in header
        covariate_names = tuple(
            c for c in header
            if c not in REQUIRED_COLUMNS and c != OPTIONAL_MODIFIER
        )

        # preserve file order of studies and strata
        studies: dict[str, dict[str, list[Subject]]] = {}
        study_has_w: dict[str, bool] = {}
        seen_keys: set[tuple[str, str, str]] = set()
        first_line: dict[tuple[str, str], int] = {}

        for i, row in enumerate(reader):
            line = i + 2
            sid = row["study_id"].strip()
            strat = row["stratum_id"].strip()
            subj = row["subject_id"].strip()
            if not sid or not strat or not subj:
                raise DataError(f"line {line}: study_id, stratum_id, subject_id required")
            key = (sid, strat, subj)
            if key in seen_keys:
                raise DataError(f"line {line}: duplicate subject key {key}")
            seen_keys.add(key)
            first_line.setdefault((sid, strat), line)

            local_w = _parse_float(row["local_w"], line, "local_w")
            ref_x = _parse_float(row["ref_x"], line, "ref_x")
            modifier = (
                _parse_float(row[OPTIONAL_MODIFIER], line, OPTIONAL_MODIFIER)
                if has_modifier else None
            )
            covariates = []
            for c in covariate_names:
                value = _parse_float(row[c], line, c)
                if value is None:
                    raise DataError(f"line {line}: covariate {c!r} is missing")
                covariates.append(value)
            subject = Subject(
                subject_id=subj,
                is_case=_parse_flag(row["is_case"], line, "is_case"),
                local_w=local_w,
                ref_x=ref_x,
                effect_modifier=modifier,
                covariates=tuple(covariates),
                in_calibration_subset=_parse_flag(
                    row["in_calibration_subset"], line, "in_calibration_subset"
                ),
            )
            studies.setdefault(sid, {}).setdefault(strat, []).append(subject)
            study_has_w[sid] = study_has_w.get(sid, False) or local_w is not None

    built = []
    for sid, strata in studies.items():
        kind = LabKind.LOCAL if study_has_w[sid] else LabKind.REFERENCE
        built.append(
            Study(
                study_id=sid,
                lab_kind=kind,
                strata=tuple(
                    Stratum(stratum_id=strat, members=tuple(members))
                    for strat, members in strata.items()
                ),
            )
        )
    design = DesignSpec(
        include_interaction=include_interaction,
        covariate_names=covariate_names,
        exposure_scale=exposure_scale,
    )
    dataset = PooledDataset(studies=tuple(built), design=design)

    issues = validate(dataset)
    if issues:
        rendered = []
        for issue in issues[:10]:
            locator = first_line.get((issue.study_id, issue.stratum_id))
            at = f" (line {locator})" if locator else ""
            rendered.append(f"{issue}{at}")
        more = f"; +{len(issues) - 10} more" if len(issues) > 10 else ""
        raise DataError(f"{path}: invalid dataset: " + "; ".join(rendered) + more)
    return dataset


def write_dataset_csv(path: str | Path, dataset: PooledDataset) -> None:
    """Subject-level CSV of a dataset, inverse of :func:`ingest_csv`."""
    has_modifier = any(
        m.effect_modifier is not None
        for st in dataset.studies for sr in st.strata for m in sr.members
    )
    header = list(REQUIRED_COLUMNS)
    if has_modifier:
        header.append(OPTIONAL_MODIFIER)
    header.extend(dataset.design.covariate_names)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for study in dataset.studies:
            for stratum in study.strata:
                for m in stratum.members:
                    row = [
                        study.study_id,
                        stratum.stratum_id,
                        m.subject_id,
                        "1" if m.is_case else "0",
                        _full(m.local_w),
                        _full(m.ref_x),
                        "1" if m.in_calibration_subset else "0",
                    ]
                    if has_modifier:
                        row.append(_full(m.effect_modifier))
                    row.extend(_full(z) for z in m.covariates)
                    writer.writerow(row)


# ---------------------------------------------------------------------------
# report payloads


@dataclass(frozen=True)
class AnalysisReport:
    """Per-method pooled coefficients for one analyzed dataset."""

    design: DesignSpec
    estimates: dict[str, tuple]   # method value -> (names, coef, se)
    input_path: str


@dataclass(frozen=True)
class SimulationReport:
    scenario: ScenarioMain
    results: tuple[tuple[float, OperatingCharacteristics], ...]  # (rr, oc)


@dataclass(frozen=True)
class CalibrationBiasReport:
    result: CalibrationBiasResult


@dataclass(frozen=True)
class CalibrationSizeReport:
    result: CalibrationSizeResult


def analysis_report(
    dataset_path: str,
    design: DesignSpec,
    aggregated: dict[PoolingMethod, AggregatedEstimate],
    twostage: MetaResult | None,
) -> AnalysisReport:
    estimates = {}
    for method, est in aggregated.items():
        estimates[method.value] = (est.names, np.asarray(est.beta), est.se)
    if twostage is not None:
        estimates[PoolingMethod.TWO_STAGE.value] = (
            twostage.names, np.asarray(twostage.coef), np.asarray(twostage.se)
        )
    return AnalysisReport(design=design, estimates=estimates, input_path=dataset_path)


# ---------------------------------------------------------------------------
# writers


METHOD_ORDER = ("internalized", "full", "twostage", "naive")


def _method_label(value: str) -> str:
    return PoolingMethod(value).label


def _scaled_rr(name: str, beta: float, se: float, scale: float):
    factor = scale if name in ("x", "xv") else 1.0
    rr = float(np.exp(beta * factor))
    lo = float(np.exp((beta - WALD_Z * se) * factor))
    hi = float(np.exp((beta + WALD_Z * se) * factor))
    return rr, lo, hi


def write_analysis_csv(path: Path, report: AnalysisReport) -> None:
    scale = report.design.exposure_scale
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "coefficient", "estimate", "se",
                         "ci_low", "ci_high", "rr", "rr_ci_low", "rr_ci_high"])
        for method in METHOD_ORDER:
            if method not in report.estimates:
                continue
            names, coef, se = report.estimates[method]
            for name, b, s in zip(names, coef, se):
                rr, lo, hi = _scaled_rr(name, b, s, scale)
                writer.writerow([
                    method, name, _fmt(b), _fmt(s),
                    _fmt(b - WALD_Z * s), _fmt(b + WALD_Z * s),
                    _fmt(rr), _fmt(lo), _fmt(hi),
                ])


def write_analysis_table(path: Path, report: AnalysisReport) -> None:
    scale = report.design.exposure_scale
    lines = []
    if not report.design.include_interaction:
        lines.append(f"{'Method':<18} {'beta_x':>10} {'RR':>8} {'RR 95% CI':>20}")
        lines.append("-" * 60)
        for method in METHOD_ORDER:
            if method not in report.estimates:
                continue
            names, coef, se = report.estimates[method]
            i = names.index("x")
            rr, lo, hi = _scaled_rr("x", coef[i], se[i], scale)
            ci = f"({_fmt(lo)}, {_fmt(hi)})"
            lines.append(f"{_method_label(method):<18} {_fmt(coef[i]):>10} {_fmt(rr):>8} {ci:>20}")
        if scale != 1.0:
            lines.append("")
            lines.append(f"RR per {_fmt(scale)} exposure units.")
    else:
        header = f"{'Method':<18}"
        names = next(iter(report.estimates.values()))[0]
        for name in names:
            header += f" {name + ' (95% CI)':>28}"
        lines.append(header)
        lines.append("-" * len(header))
        for method in METHOD_ORDER:
            if method not in report.estimates:
                continue
            est_names, coef, se = report.estimates[method]
            row = f"{_method_label(method):<18}"
            for name, b, s in zip(est_names, coef, se):
                cell = f"{_fmt(b)} ({_fmt(b - WALD_Z * s)}, {_fmt(b + WALD_Z * s)})"
                row += f" {cell:>28}"
            lines.append(row)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_records_csv(path: Path, records: Iterable[ReplicateRecord],
                      extra: dict[str, object] | None = None) -> None:
    extra = extra or {}
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(extra) + ["replicate", "method", "coefficient",
                                       "true_value", "estimate", "se",
                                       "model_se", "covered"])
        prefix = [_full(v) if isinstance(v, float) else str(v) for v in extra.values()]
        for rec in records:
            writer.writerow(prefix + [
                rec.replicate, rec.method, rec.coef,
                _full(rec.true_value), _full(rec.estimate), _full(rec.se),
                _full(rec.model_se), "1" if rec.covered else "0",
            ])


def read_records_csv(path: str | Path) -> list[ReplicateRecord]:
    """Inverse of :func:`write_records_csv` (ignores any leading context columns)."""
    out = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.append(
                ReplicateRecord(
                    replicate=int(row["replicate"]),
                    method=row["method"],
                    coef=row["coefficient"],
                    true_value=float(row["true_value"]),
                    estimate=float(row["estimate"]),
                    se=float(row["se"]),
                    model_se=float(row["model_se"]),
                    covered=row["covered"] == "1",
                )
            )
    return out


def write_simulation_summary_csv(path: Path, report: SimulationReport) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rr", "method", "coefficient", "true_value",
                         "mean_percent_bias", "empirical_se", "mean_reported_se",
                         "mse", "coverage_rate", "n_replicates", "n_failed"])
        for rr, oc in report.results:
            for row in oc.rows:
                writer.writerow([
                    _fmt(rr), row.method, row.coef, _fmt(row.true_value),
                    _fmt(row.mean_percent_bias), _fmt(row.empirical_se),
                    _fmt(row.mean_reported_se), _fmt(row.mse),
                    _fmt(row.coverage_rate), row.n_replicates, row.n_failed,
                ])


def write_simulation_table(path: Path, report: SimulationReport) -> None:
    coefs = report.scenario.design().coefficient_names()
    lines = []
    for coef in coefs:
        lines.append(f"Coefficient {coef}")
        head = (f"{'true beta':>10} | " +
                " ".join(f"{'bias% ' + m:>14}" for m in ("N", "IN", "FC", "TS")) + " | " +
                " ".join(f"{'MSE ' + m:>10}" for m in ("N", "IN", "FC", "TS")) + " | " +
                " ".join(f"{'cov ' + m:>8}" for m in ("N", "IN", "FC", "TS")))
        lines.append(head)
        lines.append("-" * len(head))
        for rr, oc in report.results:
            cells_bias, cells_mse, cells_cov = [], [], []
            for method in ("naive", "internalized", "full", "twostage"):
                row = oc.row(method, coef)
                cells_bias.append(f"{_fmt(row.mean_percent_bias) + ' (' + _fmt(row.empirical_se) + ')':>14}")
                cells_mse.append(f"{_fmt(row.mse):>10}")
                cells_cov.append(f"{_fmt(row.coverage_rate):>8}")
            true_value = oc.row("naive", coef).true_value
            lines.append(f"{_fmt(true_value):>10} | " + " ".join(cells_bias) + " | "
                         + " ".join(cells_mse) + " | " + " ".join(cells_cov))
        lines.append("")
    lines.append("bias% is the mean percent bias over replicates; the value in")
    lines.append("parentheses is the empirical standard deviation of the estimates.")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_calibration_bias_csv(path: Path, result: CalibrationBiasResult) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rr", "fit_pool", "parameter", "mean_percent_bias"])
        for row in result.rows:
            writer.writerow([_fmt(row.rr), row.fit_pool, row.param,
                             _fmt(row.mean_percent_bias)])


def write_calibration_size_csv(path: Path, result: CalibrationSizeResult) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n_cal", "method", "mean_percent_bias",
                         "empirical_se", "coverage_rate"])
        for row in result.rows:
            writer.writerow([row.n_cal, row.method, _fmt(row.mean_percent_bias),
                             _fmt(row.empirical_se), _fmt(row.coverage_rate)])


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def write_manifest(path: Path, command: str, config: dict,
                   outputs: Sequence[str], seed: int | None) -> None:
    manifest = {
        "command": command,
        "config": config,
        "config_sha256": config_hash(config),
        "outputs": sorted(outputs),
        "seed": seed,
        "version": __version__,
    }
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n",
                    encoding="utf-8")
