"""Structured report files: versioned JSON plus a flat CSV and a console table.

The JSON document is the primary artifact; CSV and the printed table render
the same numbers. With ``timestamp=False`` every byte is a function of the
inputs and flags, which is what the determinism tests rely on.
"""

from __future__ import annotations

import csv
import io
import json
import math
from datetime import datetime, timezone
from pathlib import Path

SCHEMAS = {
    "eval": "fourdkit.eval/1",
    "loss": "fourdkit.loss/1",
    "gradcheck": "fourdkit.gradcheck/1",
    "validate": "fourdkit.validate/1",
}


def _clean(obj):
    if isinstance(obj, float):
        return None if math.isnan(obj) or math.isinf(obj) else obj
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def dumps(doc: dict) -> str:
    return json.dumps(_clean(doc), indent=2, sort_keys=True, allow_nan=False) + "\n"


def with_header(kind: str, body: dict, timestamp: bool = True) -> dict:
    doc = dict(body)
    doc["schema"] = SCHEMAS[kind]
    if timestamp:
        doc["generated_at"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
    return doc


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, float):
        return "" if math.isnan(x) else repr(x)
    return str(x)


def csv_rows(kind: str, doc: dict) -> tuple[list, list]:
    """Header and rows of the flat rendering of a report."""
    if kind == "eval":
        cols = ["name", "epe_points", "apd", "epe_flow", "tau", "abs_rel", "delta_125", "dynamic_points", "flow_vectors", "align_scale"]
        rows = []
        for s in doc["sequences"]:
            rows.append(
                [s["name"]]
                + [s[k] for k in cols[1:7]]
                + [s["counts"]["dynamic_points"], s["counts"]["flow_vectors"], s["alignment"]["scale"]]
            )
        agg = doc["aggregate"]
        rows.append(["__mean__"] + [agg[k] for k in cols[1:7]] + [None, None, None])
        return cols, rows
    if kind == "loss":
        cols = ["term", "value", "weight", "weighted", "available"]
        rows = [
            [k, v, doc["weights"][k], v * doc["weights"][k], doc["available"].get(k, True)]
            for k, v in doc["terms"].items()
        ]
        rows.append(["__total__", doc["total"], None, doc["total"], None])
        return cols, rows
    if kind == "gradcheck":
        cols = ["loss", "max_rel_error", "n_points", "n_coords", "passed"]
        return cols, [[r[c] for c in cols] for r in doc["losses"]]
    if kind == "validate":
        cols = ["code", "view", "grid", "count", "message"]
        return cols, [[d[c] for c in cols] for d in doc["diagnostics"]]
    raise KeyError(kind)


def to_csv(kind: str, doc: dict) -> str:
    cols, rows = csv_rows(kind, doc)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(x) for x in r])
    return buf.getvalue()


def to_table(kind: str, doc: dict) -> str:
    cols, rows = csv_rows(kind, doc)
    cells = [cols] + [[_short(x) for x in r] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _short(x) -> str:
    if isinstance(x, float) and not isinstance(x, bool):
        return "nan" if math.isnan(x) else f"{x:.6g}"
    if x is None:
        return "-"
    return _fmt(x)


def write_report(kind: str, doc: dict, out) -> dict:
    """Write ``out`` (JSON) and a sibling ``.csv``; return the written paths."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(dumps(doc))
    csv_path = out.with_suffix(".csv")
    csv_path.write_text(to_csv(kind, doc))
    return {"json": out, "csv": csv_path}


def figure_stem(out) -> Path:
    out = Path(out)
    return out.with_suffix("")
