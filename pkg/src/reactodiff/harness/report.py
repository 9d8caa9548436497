"""Report bundles and their on-disk form (report.json plus one CSV per table)."""
from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__
from ..errors import IoFailure


@dataclass
class Table:
    header: list
    rows: list = field(default_factory=list)

    def add(self, *row):
        if len(row) != len(self.header):
            raise ValueError(f"row has {len(row)} cells, header has {len(self.header)}")
        self.rows.append(row)


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    return str(v)


def table_csv(table: Table) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(table.header)
    for row in table.rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


@dataclass
class ReportBundle:
    config: dict
    kind: str = ""
    tables: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    audits: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    version: str = __version__

    def audit(self, name: str, passed: bool, **detail):
        self.audits.append({"name": name, "passed": bool(passed), **detail})

    @property
    def passed(self) -> bool:
        return all(a["passed"] for a in self.audits)

    def to_json(self) -> dict:
        return {
            "artifact": "reactodiff",
            "version": self.version,
            "kind": self.kind,
            "passed": self.passed,
            "config": self.config,
            "summary": self.summary,
            "audits": self.audits,
            "tables": {name: f"{name}.csv" for name in self.tables},
            "timings": self.timings,
        }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        # JSON has no infinities; keep them readable
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def emit_report(bundle: ReportBundle, out_dir) -> list[Path]:
    """Write report.json and <table>.csv files; returns the written paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for name, table in bundle.tables.items():
            path = out / f"{name}.csv"
            _atomic_write(path, table_csv(table))
            written.append(path)
        path = out / "report.json"
        _atomic_write(path, json.dumps(_jsonable(bundle.to_json()), indent=2, sort_keys=True) + "\n")
        written.append(path)
    except OSError as exc:
        raise IoFailure(f"cannot write report to {out}: {exc}") from exc
    return written
