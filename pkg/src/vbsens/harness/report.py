"""Comparison reports and their deterministic serialization."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

ROW_FIELDS = ("parameter", "statistic", "exact", "exact_se", "mfvb", "lrvb", "laplace", "ess")
REPORT_NAME = "report.json"
MANIFEST_NAME = "manifest.json"


def _clean(obj: Any) -> Any:
    """Recursively convert numpy values to plain Python; non-finite floats become None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        val = float(obj)
        return val if math.isfinite(val) else None
    return obj


@dataclass
class ComparisonReport:
    """Per-quantity comparison rows, matrix tables and provenance.

    Each row holds one parameter/statistic pair with the exact (or MCMC)
    value, its standard error, the MFVB, LRVB and Laplace estimates and the
    ESS. Cells that could not be computed are None.
    """

    experiment: str
    rows: list[dict] = field(default_factory=list)
    tables: dict[str, dict] = field(default_factory=dict)
    diagnostics: dict[str, Any] = field(default_factory=dict)
    provenance: dict[str, Any] = field(default_factory=dict)
    errors: list[dict] = field(default_factory=list)

    def add_row(self, parameter: str, statistic: str, **cells) -> None:
        unknown = set(cells) - set(ROW_FIELDS)
        if unknown:
            raise KeyError(f"unknown report columns {sorted(unknown)}")
        row = {k: None for k in ROW_FIELDS}
        row.update(parameter=parameter, statistic=statistic, **cells)
        self.rows.append(_clean(row))

    def add_table(self, name: str, values, row_labels, col_labels) -> None:
        values = np.atleast_2d(np.asarray(values, dtype=np.float64))
        if values.shape != (len(row_labels), len(col_labels)):
            raise ValueError(f"table {name!r} has shape {values.shape} but labels imply "
                             f"{(len(row_labels), len(col_labels))}")
        self.tables[name] = {
            "row_labels": [str(s) for s in row_labels],
            "col_labels": [str(s) for s in col_labels],
            "values": _clean(values),
        }

    def add_error(self, stage: str, exc: BaseException) -> None:
        self.errors.append({"stage": stage, "error": type(exc).__name__, "message": str(exc)})

    def row(self, parameter: str, statistic: str) -> dict:
        for r in self.rows:
            if r["parameter"] == parameter and r["statistic"] == statistic:
                return r
        raise KeyError((parameter, statistic))

    def column(self, statistic: str, name: str) -> dict[str, Any]:
        return {r["parameter"]: r[name] for r in self.rows if r["statistic"] == statistic}

    def table(self, name: str) -> np.ndarray:
        vals = self.tables[name]["values"]
        return np.array([[np.nan if v is None else v for v in r] for r in vals], dtype=np.float64).reshape(
            len(self.tables[name]["row_labels"]), len(self.tables[name]["col_labels"])
        )

    @property
    def failed(self) -> bool:
        return bool(self.errors)

    def to_dict(self) -> dict:
        return _clean(
            {
                "experiment": self.experiment,
                "rows": self.rows,
                "tables": self.tables,
                "diagnostics": self.diagnostics,
                "provenance": self.provenance,
                "errors": self.errors,
            }
        )

    @classmethod
    def from_dict(cls, doc: dict) -> "ComparisonReport":
        return cls(
            experiment=doc["experiment"],
            rows=list(doc.get("rows", [])),
            tables=dict(doc.get("tables", {})),
            diagnostics=dict(doc.get("diagnostics", {})),
            provenance=dict(doc.get("provenance", {})),
            errors=list(doc.get("errors", [])),
        )


def to_json(report: ComparisonReport) -> str:
    return json.dumps(report.to_dict(), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    return buf.getvalue()


def emit_report(report: ComparisonReport, fmt: str, path) -> list[Path]:
    """Write ``report`` under directory ``path``; returns the written files.

    ``json`` writes a single ``report.json``. ``csv`` writes ``rows.csv``,
    one ``table_<name>.csv`` per matrix table and ``manifest.json`` carrying
    the file list, diagnostics, provenance and errors. Output bytes depend
    only on the report contents.
    """
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        target = out / REPORT_NAME
        target.write_text(to_json(report))
        return [target]
    if fmt != "csv":
        raise ValueError(f"unknown report format {fmt!r}")
    written = []
    rows_path = out / "rows.csv"
    rows_path.write_text(_csv_text(ROW_FIELDS, [[r[k] for k in ROW_FIELDS] for r in report.rows]))
    written.append(rows_path)
    for name in sorted(report.tables):
        t = report.tables[name]
        p = out / f"table_{name}.csv"
        p.write_text(_csv_text([""] + t["col_labels"], [[lab] + list(v) for lab, v in zip(t["row_labels"], t["values"])]))
        written.append(p)
    doc = report.to_dict()
    manifest = {
        "experiment": doc["experiment"],
        "files": {"rows": rows_path.name, "tables": {n: f"table_{n}.csv" for n in sorted(report.tables)}},
        "diagnostics": doc["diagnostics"],
        "provenance": doc["provenance"],
        "errors": doc["errors"],
    }
    mpath = out / MANIFEST_NAME
    mpath.write_text(json.dumps(manifest, sort_keys=True, indent=2, allow_nan=False) + "\n")
    written.append(mpath)
    return written


def _parse(v: str, numeric: bool):
    if v == "":
        return None
    if not numeric:
        return v
    return float(v)


def load_report(path) -> ComparisonReport:
    """Read a report written by :func:`emit_report` (either format)."""
    p = Path(path)
    if p.is_dir():
        if (p / REPORT_NAME).exists():
            p = p / REPORT_NAME
        elif (p / MANIFEST_NAME).exists():
            return _load_csv(p)
        else:
            raise FileNotFoundError(f"no report found in {p}")
    return ComparisonReport.from_dict(json.loads(p.read_text()))


def _load_csv(directory: Path) -> ComparisonReport:
    manifest = json.loads((directory / MANIFEST_NAME).read_text())
    with open(directory / manifest["files"]["rows"], newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [{k: _parse(v, k not in ("parameter", "statistic")) for k, v in zip(header, r)} for r in reader]
    tables = {}
    for name, fname in manifest["files"]["tables"].items():
        with open(directory / fname, newline="") as fh:
            reader = csv.reader(fh)
            cols = next(reader)[1:]
            labels, values = [], []
            for r in reader:
                labels.append(r[0])
                values.append([_parse(v, True) for v in r[1:]])
        tables[name] = {"row_labels": labels, "col_labels": cols, "values": values}
    return ComparisonReport(
        experiment=manifest["experiment"],
        rows=rows,
        tables=tables,
        diagnostics=manifest["diagnostics"],
        provenance=manifest["provenance"],
        errors=manifest["errors"],
    )
