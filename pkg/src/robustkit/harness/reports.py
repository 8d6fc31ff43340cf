"""Tabular reports that serialize to JSON and CSV with identical values."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

# Fields that legitimately differ between reruns; excluded from reproducibility checks.
VOLATILE_META = ("wall_clock_s",)


def config_hash(obj: Any) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _cell(v):
    if hasattr(v, "item") and not isinstance(v, (str, bytes)):
        v = v.item()  # numpy / torch scalars
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(v: str):
    for conv in (int, float):
        try:
            return conv(v)
        except ValueError:
            pass
    return v


@dataclass
class Table:
    """Named columns of scalars plus a free-form metadata dict."""

    name: str
    columns: list[str]
    rows: list[list[Any]] = field(default_factory=list)
    meta: dict[str, Any] = field(default_factory=dict)

    def add(self, *values) -> None:
        if len(values) != len(self.columns):
            raise ValueError(f"row has {len(values)} values for {len(self.columns)} columns")
        self.rows.append(list(values))

    def column(self, name: str) -> list:
        i = self.columns.index(name)
        return [r[i] for r in self.rows]

    def where(self, **match) -> list[dict]:
        out = []
        for r in self.rows:
            d = dict(zip(self.columns, r))
            if all(d[k] == v for k, v in match.items()):
                out.append(d)
        return out

    # -- serialization ----------------------------------------------------

    def to_json(self) -> str:
        return json.dumps(
            {"name": self.name, "columns": self.columns, "rows": self.rows, "meta": self.meta},
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "Table":
        d = json.loads(text)
        return cls(d["name"], d["columns"], d["rows"], d.get("meta", {}))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([_cell(v) for v in r])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, name: str = "", meta: dict | None = None) -> "Table":
        rows = list(csv.reader(io.StringIO(text)))
        return cls(name, rows[0], [[_parse(v) for v in r] for r in rows[1:]], meta or {})

    def save(self, out_dir: str | Path, stem: str | None = None) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = stem or self.name
        pj, pc = out / f"{stem}.json", out / f"{stem}.csv"
        pj.write_text(self.to_json())
        pc.write_text(self.to_csv())
        return pj, pc

    def stable(self) -> dict:
        """Everything except volatile metadata, for rerun comparisons."""
        meta = {k: v for k, v in self.meta.items() if k not in VOLATILE_META}
        return {"name": self.name, "columns": self.columns, "rows": self.rows, "meta": meta}


def robustness_report(
    label: str,
    epsilons: Sequence[float],
    accuracies: Sequence[float],
    n: int,
    meta: dict,
) -> Table:
    t = Table("robust_curve", ["predictor", "epsilon", "epsilon_255", "accuracy", "n"], meta=dict(meta))
    for e, a in zip(epsilons, accuracies):
        if not 0.0 <= a <= 1.0:
            raise ValueError(f"accuracy {a} outside [0,1]")
        t.add(label, float(e), round(float(e) * 255, 6), float(a), int(n))
    if n <= 0:
        raise ValueError("sample count must be positive")
    return t
