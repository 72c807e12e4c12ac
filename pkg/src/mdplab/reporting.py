"""Check reports and their JSON / CSV serialisation.

Floats are written with 17 significant digits and keys in insertion order, so
identical results always produce byte-identical files.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

CSV_COLUMNS = ("check_id", "n", "alpha", "quantity", "value", "ci_lo", "ci_hi", "envelope")
CSV_HEADER_COMMENT = (
    "# columns: check_id=check name; n=trajectory length (blank if not applicable); alpha=normalising exponent; "
    "quantity=row label; value=estimate; ci_lo/ci_hi=95% interval; envelope=analytic bound or target"
)


@dataclass
class CheckReport:
    check_id: str
    rows: list[dict] = field(default_factory=list)
    flags: dict[str, bool] = field(default_factory=dict)
    info: dict[str, Any] = field(default_factory=dict)
    hard: tuple[str, ...] = ()

    def add_row(self, quantity, value, n=None, alpha=None, ci_lo=None, ci_hi=None, envelope=None):
        self.rows.append(
            {
                "n": n,
                "alpha": alpha,
                "quantity": quantity,
                "value": value,
                "ci_lo": ci_lo,
                "ci_hi": ci_hi,
                "envelope": envelope,
            }
        )

    @property
    def passed(self) -> bool:
        return all(self.flags.values())

    @property
    def hard_failures(self) -> list[str]:
        return [k for k in self.hard if not self.flags.get(k, True)]

    def to_dict(self, config_echo: dict | None = None) -> dict:
        return {
            "check_id": self.check_id,
            "config": config_echo or {},
            "rows": self.rows,
            "flags": self.flags,
            "passed": self.passed,
            "info": self.info,
        }


def _plain(obj):
    """Convert numpy / sentinel values into JSON-ready Python objects."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    if obj is None or isinstance(obj, str):
        return obj
    if hasattr(obj, "__float__"):
        return float(obj)
    return str(obj)


def fmt_float(x: float) -> str:
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(x, ".17g")


def _dump(obj, indent: int, level: int, out: list[str]):
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(obj, dict):
        if not obj:
            out.append("{}")
            return
        out.append("{\n")
        items = list(obj.items())
        for i, (k, v) in enumerate(items):
            out.append(pad + json.dumps(k) + ": ")
            _dump(v, indent, level + 1, out)
            out.append(",\n" if i < len(items) - 1 else "\n")
        out.append(end + "}")
    elif isinstance(obj, list):
        if not obj:
            out.append("[]")
            return
        if all(not isinstance(v, (dict, list)) for v in obj):
            out.append("[" + ", ".join(_scalar(v) for v in obj) + "]")
            return
        out.append("[\n")
        for i, v in enumerate(obj):
            out.append(pad)
            _dump(v, indent, level + 1, out)
            out.append(",\n" if i < len(obj) - 1 else "\n")
        out.append(end + "]")
    else:
        out.append(_scalar(obj))


def _scalar(v) -> str:
    if isinstance(v, bool) or v is None:
        return json.dumps(v)
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        s = fmt_float(v)
        # JSON has no inf/nan literals: tag them as strings
        return json.dumps(s) if s in ("nan", "inf", "-inf") else s
    return json.dumps(v)


def dumps(obj, indent: int = 2) -> str:
    out: list[str] = []
    _dump(_plain(obj), indent, 0, out)
    return "".join(out) + "\n"


def results_to_json(reports: list[dict], meta: dict) -> str:
    return dumps({"meta": meta, "checks": reports})


def results_to_csv(reports: list[dict]) -> str:
    buf = io.StringIO()
    buf.write(CSV_HEADER_COMMENT + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for rep in reports:
        for row in rep["rows"]:
            cells = [rep["check_id"]]
            for col in CSV_COLUMNS[1:]:
                v = _plain(row.get(col))
                if v is None:
                    cells.append("")
                elif isinstance(v, float):
                    cells.append(fmt_float(v))
                else:
                    cells.append(str(v))
            w.writerow(cells)
    return buf.getvalue()


def read_csv_rows(text: str) -> list[dict]:
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))
