"""Result tables and their CSV/JSON emitters.

Files are UTF-8 with '.' decimals, one row per result and a header row.
Floats are written with ``repr`` so they round-trip exactly.  Wall-clock
runtime is kept on the rows but left out of files unless requested, so that
a rerun with the same config and seed reproduces the file byte for byte.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

COLUMNS = ("experiment", "label", "solver", "value", "std_error", "config_hash")


@dataclass
class ResultRow:
    experiment: str
    label: str
    solver: str
    value: float
    std_error: float = float("nan")
    config_hash: str = ""
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    runtime: float = float("nan")

    def record(self, include_runtime: bool = False) -> dict[str, Any]:
        out = {c: getattr(self, c) for c in COLUMNS}
        out.update(self.extra)
        if include_runtime:
            out["runtime"] = self.runtime
        out["config"] = self.config
        return out


@dataclass
class ResultTable:
    name: str
    rows: list[ResultRow] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def append(self, row: ResultRow) -> None:
        self.rows.append(row)

    def find(self, label: str, solver: str | None = None) -> ResultRow:
        for row in self.rows:
            if row.label == label and (solver is None or row.solver == solver):
                return row
        raise KeyError((label, solver))

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)


def _json_default(obj):
    if hasattr(obj, "item"):
        return obj.item()
    if isinstance(obj, (tuple, set)):
        return list(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _clean(v):
    """JSON has no NaN/inf: map them to null."""
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    return v


def to_json(table: ResultTable, include_runtime: bool = False) -> str:
    doc = {"table": table.name, "meta": table.meta,
           "rows": [row.record(include_runtime) for row in table.rows]}
    return json.dumps(_clean(json.loads(json.dumps(doc, default=_json_default))), indent=2,
                      sort_keys=False, ensure_ascii=False) + "\n"


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (dict, list)):
        return json.dumps(v, sort_keys=True, default=_json_default)
    return "" if v is None else str(v)


def to_csv(table: ResultTable, include_runtime: bool = False) -> str:
    records = [row.record(include_runtime) for row in table.rows]
    header = list(COLUMNS)
    for rec in records:
        for k in rec:
            if k not in header and k != "config":
                header.append(k)
    header.append("config")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for rec in records:
        w.writerow([_cell(rec.get(k)) for k in header])
    return buf.getvalue()


def render(table: ResultTable, fmt: str = "json", include_runtime: bool = False) -> str:
    if fmt == "json":
        return to_json(table, include_runtime)
    if fmt == "csv":
        return to_csv(table, include_runtime)
    raise ValueError(f"unknown format {fmt!r}")


def write_table(table: ResultTable, out_dir: str | Path, fmt: str = "json",
                include_runtime: bool = False) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{table.name}.{fmt}"
    path.write_text(render(table, fmt, include_runtime), encoding="utf-8")
    return path


def write_rows_csv(rows: list[dict], path: str | Path) -> Path:
    """Plain CSV of homogeneous dict rows (header from the first row)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if rows:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: _cell(v) for k, v in r.items()})
    return path
