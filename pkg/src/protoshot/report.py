"""Comparison tables (rows = N-way K-shot cells, columns = regimes) and shot-vs-accuracy curves."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

from protoshot.evaluation import EvalReport

METRICS = ("accuracy", "macro_f1")


class ReportError(ValueError):
    pass


def cell_key(cell: str) -> tuple[int, int]:
    n, k = cell.rstrip("s").split("w")
    return int(n), int(k)


@dataclass(frozen=True)
class TableCell:
    mean: float
    half_width: float | None
    rank: int | None = None  # 1 = best, 2 = second best
    tie: bool = False


@dataclass
class ComparisonTable:
    rows: list[str]
    columns: list[str]
    cells: dict[tuple[str, str], TableCell] = field(default_factory=dict)
    metric: str = "accuracy"

    def get(self, row: str, col: str) -> TableCell | None:
        return self.cells.get((row, col))

    def best(self, row: str) -> str | None:
        return next((c for c in self.columns if (x := self.get(row, c)) and x.rank == 1), None)

    def second(self, row: str) -> str | None:
        return next((c for c in self.columns if (x := self.get(row, c)) and x.rank == 2), None)

    # ---------------------------------------------------------------- renderers

    def to_markdown(self) -> str:
        head = f"| cell | " + " | ".join(self.columns) + " |"
        sep = "|---|" + "---|" * len(self.columns)
        lines = [f"{self.metric} (%), mean ± 95% half-width", "", head, sep]
        any_tie = False
        for row in self.rows:
            out = []
            for col in self.columns:
                c = self.get(row, col)
                if c is None:
                    out.append("n/a")
                    continue
                text = _pct(c.mean) + ("" if c.half_width is None else f" ± {_pct(c.half_width)}")
                if c.rank == 1:
                    text = f"**{text}**"
                elif c.rank == 2:
                    text = f"<u>{text}</u>"
                if c.tie:
                    text += " †"
                    any_tie = True
                out.append(text)
            lines.append(f"| {row} | " + " | ".join(out) + " |")
        lines += ["", "Bold: best per row. Underlined: second best."]
        if any_tie:
            lines.append("†: tied mean; the tie is broken toward the earlier column.")
        return "\n".join(lines) + "\n"

    CSV_HEADER = ("cell", "N", "K", "regime", "mean_pct", "half_width_pct", "rank", "tie")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_HEADER)
        for row in self.rows:
            n, k = cell_key(row)
            for col in self.columns:
                c = self.get(row, col)
                if c is None:
                    w.writerow((row, n, k, col, "", "", "absent", ""))
                    continue
                hw = "" if c.half_width is None else _pct(c.half_width)
                w.writerow((row, n, k, col, _pct(c.mean), hw, c.rank or "", "tie" if c.tie else ""))
        return buf.getvalue()

    def to_json(self) -> str:
        obj = {
            "metric": self.metric,
            "rows": self.rows,
            "columns": self.columns,
            "cells": [
                {"cell": r, "regime": c, "mean": x.mean, "half_width_95": x.half_width, "rank": x.rank, "tie": x.tie}
                for r in self.rows
                for c in self.columns
                if (x := self.get(r, c)) is not None
            ],
        }
        return json.dumps(obj, indent=2, sort_keys=True) + "\n"

    def render(self, fmt: str) -> str:
        renderers = {"csv": self.to_csv, "md": self.to_markdown, "json": self.to_json}
        if fmt not in renderers:
            raise ReportError(f"unknown table format {fmt!r}; expected csv, json or md")
        return renderers[fmt]()


def _pct(x: float) -> str:
    return f"{100.0 * x:.2f}"


def rank_row(means: list[float | None]) -> tuple[list[int | None], list[bool]]:
    """Rank 1/2 by descending mean; ties resolve to the earlier column and are flagged."""
    present = [(i, m) for i, m in enumerate(means) if m is not None]
    order = sorted(present, key=lambda t: (-t[1], t[0]))
    ranks: list[int | None] = [None] * len(means)
    for r, (i, _) in enumerate(order[:2], start=1):
        ranks[i] = r
    ties = [False] * len(means)
    for i, m in present:
        if ranks[i] is not None and any(j != i and mj == m for j, mj in present):
            ties[i] = True
    return ranks, ties


def _metric(rep: EvalReport, metric: str) -> tuple[float, float | None]:
    if metric == "accuracy":
        return rep.acc_mean, rep.acc_half_width
    if metric == "macro_f1":
        return rep.f1_mean, rep.f1_half_width
    raise ReportError(f"unknown metric {metric!r}")


def emit_table(reports, columns: list[str] | None = None, metric: str = "accuracy") -> ComparisonTable:
    """Assemble reports into a ComparisonTable; conflicting duplicates of a (regime, cell) are an error."""
    reports = list(reports)
    if not reports:
        raise ReportError("emit_table needs at least one report")
    by_key: dict[tuple[str, str], EvalReport] = {}
    for rep in reports:
        key = (rep.spec.cell, rep.regime)
        if key in by_key and by_key[key].body() != rep.body():
            raise ReportError(f"conflicting duplicate reports for regime {rep.regime!r}, cell {rep.spec.cell}")
        by_key[key] = rep
    seen = list(dict.fromkeys(rep.regime for rep in reports))
    cols = list(columns) if columns is not None else seen
    missing = set(seen) - set(cols)
    if missing:
        raise ReportError(f"reports for regimes not in the column list: {sorted(missing)}")
    rows = sorted({rep.spec.cell for rep in reports}, key=cell_key)
    table = ComparisonTable(rows, cols, metric=metric)
    for row in rows:
        vals = [(_metric(by_key[(row, c)], metric) if (row, c) in by_key else None) for c in cols]
        ranks, ties = rank_row([v[0] if v else None for v in vals])
        for c, v, r, t in zip(cols, vals, ranks, ties):
            if v is not None:
                table.cells[(row, c)] = TableCell(v[0], v[1], r, t)
    return table


def curves_csv(reports) -> str:
    """Shot-vs-accuracy series, one line per (regime, N, K)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("regime", "n_way", "k_shot", "acc_mean", "acc_hw", "f1_mean", "f1_hw"))
    rows = sorted(reports, key=lambda r: (r.regime, r.spec.n_way, r.spec.k_shot))
    for r in rows:
        w.writerow((
            r.regime, r.spec.n_way, r.spec.k_shot, repr(r.acc_mean),
            "" if r.acc_half_width is None else repr(r.acc_half_width),
            repr(r.f1_mean), "" if r.f1_half_width is None else repr(r.f1_half_width),
        ))
    return buf.getvalue()


def write_report(rep: EvalReport, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(rep.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_report(path: str | Path) -> EvalReport:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        return EvalReport.from_json(obj)
    except (OSError, ValueError, KeyError, TypeError) as err:
        raise ReportError(f"{path}: not a valid eval report ({err})") from err


def collect_reports(directory: str | Path) -> list[EvalReport]:
    """Read every ``<dir>/<regime>/<NwKs>.json``, in directory order."""
    directory = Path(directory)
    paths = sorted(p for p in directory.glob("*/*.json") if p.stem[:1].isdigit())
    if not paths:
        raise ReportError(f"no reports found under {directory}")
    return [read_report(p) for p in paths]


def write_tables(reports, out_dir: str | Path, formats=("csv", "md"), columns=None, metric="accuracy") -> ComparisonTable:
    out_dir = Path(out_dir)
    reports = list(reports)
    table = emit_table(reports, columns, metric)
    for fmt in formats:
        (out_dir / f"table.{fmt}").write_text(table.render(fmt), encoding="utf-8")
    (out_dir / "curves.csv").write_text(curves_csv(reports), encoding="utf-8")
    return table


def report_schema() -> dict:
    from importlib.resources import files

    return json.loads((files("protoshot") / "schemas" / "eval_report.schema.json").read_text(encoding="utf-8"))
