"""Result records (one JSON object per line) and the mean±std tables built
from them."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DataError
from .trainer import aggregate_runs

MISSING = "------"
RECORD_GLOB = "*.jsonl"


def method_name(omega: float) -> str:
    return "Color-S4L" if omega > 0 else "Supervised"


def run_id(record: dict) -> str:
    return (f"{record['dataset']}_{record['arch']}_{record['method']}_"
            f"{record['budget']}L_seed{record['seed']}")


def append_record(results_dir, record: dict) -> Path:
    """Append ``record`` to the per-run file so concurrent runs never share
    a file handle."""
    path = Path(results_dir) / "records" / f"{run_id(record)}.jsonl"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
    return path


def read_records(results_dir) -> list[dict]:
    root = Path(results_dir)
    files = sorted((root / "records").glob(RECORD_GLOB)) + sorted(root.glob(RECORD_GLOB))
    records = []
    for path in files:
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed record ({exc})") from exc
    return records


def budget_label(budget: int) -> str:
    return f"{budget}L"


@dataclass
class ResultTable:
    dataset: str
    budgets: list
    rows: dict  # (method, arch) -> {budget: cell}
    footnotes: list = field(default_factory=list)

    def cell(self, method: str, arch: str, budget: int) -> str:
        return self.rows.get((method, arch), {}).get(budget, MISSING)

    def header(self) -> list[str]:
        return [f"Method({self.dataset})", "Arch"] + [budget_label(b) for b in self.budgets]

    def body(self) -> list[list[str]]:
        return [[method, arch] + [self.cell(method, arch, b) for b in self.budgets]
                for method, arch in sorted(self.rows, key=_row_order)]


def _row_order(key):
    method, arch = key
    return (method != "Supervised", method, arch)


def build_tables(records: list[dict], budgets=None) -> list[ResultTable]:
    """Aggregate successful records into one table per dataset.

    With ``budgets`` the columns follow that request; requested budgets with
    no records are dropped and noted in the footnotes.
    """
    ok = [r for r in records if r.get("status", "ok") == "ok"]
    if not ok:
        raise DataError("no successful result records found")
    grouped = defaultdict(lambda: defaultdict(list))
    for r in ok:
        grouped[r["dataset"]][(r["method"], r["arch"], int(r["budget"]))].append(r)
    tables = []
    for dataset in sorted(grouped):
        cells = grouped[dataset]
        present = sorted({b for _, _, b in cells})
        wanted = sorted(set(budgets)) if budgets else present
        columns = [b for b in wanted if b in present]
        notes = [f"note: no records for {budget_label(b)}; column omitted"
                 for b in wanted if b not in present]
        rows = defaultdict(dict)
        for (method, arch, budget), runs in cells.items():
            if budget not in columns:
                continue
            by_seed = {r["seed"]: r["error_rate"] for r in runs}
            rows[(method, arch)][budget] = aggregate_runs(
                [by_seed[s] for s in sorted(by_seed)]).cell
        tables.append(ResultTable(dataset, columns, dict(rows), notes))
    return tables


def render_text(table: ResultTable) -> str:
    grid = [table.header()] + table.body()
    widths = [max(len(row[i]) for row in grid) for i in range(len(grid[0]))]
    lines = []
    for n, row in enumerate(grid):
        lines.append("  ".join(c.ljust(w) if i < 2 else c.rjust(w)
                               for i, (c, w) in enumerate(zip(row, widths))).rstrip())
        if n == 0:
            lines.append("-" * len(lines[0]))
    lines.extend(table.footnotes)
    return "\n".join(lines) + "\n"


def write_csv(table: ResultTable, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "arch"] + [budget_label(b) for b in table.budgets])
        for row in table.body():
            w.writerow(row)
    return path


def read_csv(path, dataset: str) -> ResultTable:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty table")
    budgets = [int(h[:-1]) for h in rows[0][2:]]
    table_rows = {}
    for row in rows[1:]:
        method, arch, *cells = row
        table_rows[(method, arch)] = {b: c for b, c in zip(budgets, cells) if c != MISSING}
    return ResultTable(dataset, budgets, table_rows)


def loss_curves(record: dict) -> dict:
    trace = record.get("loss_trace") or {}
    return {k: trace.get(k, []) for k in ("total", "l_super", "l_self") if trace.get(k)}


def write_report(results_dir, out_dir=None, budgets=None, plots: bool = True) -> tuple[list[ResultTable], str]:
    """Render every table as text and CSV and a loss plot per run.

    Returns the tables and the combined text rendering. Records are only read.
    """
    from .plotting import plot_loss_curve

    records = read_records(results_dir)
    if not records:
        raise DataError(f"no result records under {results_dir}")
    out = Path(out_dir) if out_dir is not None else Path(results_dir)
    tables = build_tables(records, budgets)
    texts = []
    for table in tables:
        text = render_text(table)
        texts.append(text)
        (out / f"table_{table.dataset}.txt").parent.mkdir(parents=True, exist_ok=True)
        (out / f"table_{table.dataset}.txt").write_text(text, encoding="utf-8")
        write_csv(table, out / f"table_{table.dataset}.csv")
    if plots:
        for r in records:
            curves = loss_curves(r)
            if r.get("status", "ok") == "ok" and curves:
                plot_loss_curve(curves, out / "plots" / f"{run_id(r)}.png", title=run_id(r))
    return tables, "\n".join(texts)
