"""Tables and plots from finished runs.

``results.csv`` columns (fixed, UTF-8, comma-separated)::

    method,g2b,Avg,Last,F_K,#P,backbone,rounds,stream_seed,init_seed

Avg and Last are percentages with two decimals, F_K is the forgetting after
the final round (four decimals, empty for single-round runs) and #P is the
parameter count in millions.

``deltas.csv`` / ``deltas.md`` pair every vanilla method with its G2B variant
(seed means) and report the signed difference, e.g. ``68.57 (+2.86)``.

``ablation.csv`` / ``ablation.md`` list side-branch block patterns against
#P, Avg and Last.
"""

from __future__ import annotations

import csv
import io
import re
from collections import defaultdict
from pathlib import Path
from statistics import mean
from typing import Iterable, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from g2b.harness import RunRecord, atomic_write_bytes, atomic_write_text  # noqa: E402

__all__ = [
    "ABLATION_HEADER",
    "DELTA_HEADER",
    "RESULTS_HEADER",
    "IncompatibleGroupError",
    "emit_ablation_report",
    "emit_report",
    "format_delta",
    "results_table",
]

RESULTS_HEADER = ["method", "g2b", "Avg", "Last", "F_K", "#P", "backbone", "rounds", "stream_seed", "init_seed"]
DELTA_HEADER = ["group", "method", "metric", "vanilla", "g2b", "delta"]
ABLATION_HEADER = ["blocks", "#P", "Avg", "Last", "F_K"]

# configs that must agree for runs to be compared side by side
STREAM_KEYS = ("dataset", "classes_per_round", "max_rounds", "memory_budget")


class IncompatibleGroupError(ValueError):
    pass


def _pct(x: float) -> str:
    return f"{100 * x:.2f}"


def format_delta(value: float, delta: float) -> str:
    """``68.57 (+2.86)``: value and signed improvement, both in percent."""
    return f"{100 * value:.2f} ({100 * delta:+.2f})"


def _cfg(r: RunRecord) -> dict:
    return r.config


def _variant(r: RunRecord) -> str:
    c = _cfg(r)
    return f"G2B({c['strategy']})" if c["g2b"] else c["strategy"]


def _results_row(r: RunRecord) -> list[str]:
    c = _cfg(r)
    return [
        c["strategy"],
        str(int(c["g2b"])),
        _pct(r.avg),
        _pct(r.last),
        "" if r.forgetting is None else f"{r.forgetting:.4f}",
        f"{r.param_count:.4f}",
        c["backbone"],
        str(r.accuracy.rounds),
        str(c["stream_seed"]),
        str(c["init_seed"]),
    ]


def _csv(header: Sequence[str], rows: Iterable[Sequence[str]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def results_table(records: Sequence[RunRecord]) -> str:
    rows = sorted(_results_row(r) for r in records)
    return _csv(RESULTS_HEADER, rows)


def _group_key(r: RunRecord, group_by: Sequence[str]) -> str:
    return "_".join(str(_cfg(r)[k]) for k in group_by)


def _check_compatible(group: str, records: Sequence[RunRecord]) -> None:
    ref = records[0]
    for r in records[1:]:
        for key in STREAM_KEYS:
            if _cfg(r)[key] != _cfg(ref)[key]:
                raise IncompatibleGroupError(
                    f"group {group!r}: {key} differs ({_cfg(ref)[key]!r} vs {_cfg(r)[key]!r})"
                )
        if r.accuracy.rounds != ref.accuracy.rounds:
            raise IncompatibleGroupError(f"group {group!r}: runs have different round counts")


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "-", name)


def _plot(path: Path, group: str, records: Sequence[RunRecord]) -> None:
    lines = defaultdict(list)
    for r in records:
        lines[_variant(r)].append([100 * r.accuracy.o(k) for k in range(r.accuracy.rounds)])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label in sorted(lines):
        curves = lines[label]
        ys = [mean(v) for v in zip(*curves)]
        ax.plot(range(1, len(ys) + 1), ys, marker="o", label=f"{label} (n={len(curves)})")
    ax.set_xlabel("round")
    ax.set_ylabel("accuracy on seen classes (%)")
    ax.set_title(group)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    buf = io.BytesIO()
    fig.savefig(buf, format=path.suffix[1:], metadata={"Software": None} if path.suffix == ".png" else {"Date": None})
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def _means(records: Sequence[RunRecord]) -> dict[str, float | None]:
    f = [r.forgetting for r in records if r.forgetting is not None]
    return {
        "Avg": mean(r.avg for r in records),
        "Last": mean(r.last for r in records),
        "F_K": mean(f) if f else None,
    }


def emit_report(
    records: Sequence[RunRecord],
    out_dir: str | Path,
    group_by: Sequence[str] = ("backbone", "strategy"),
    image_format: str = "png",
) -> dict[str, list[Path]]:
    """Write results/delta tables and one accuracy-per-round plot per group."""
    if not records:
        raise ValueError("emit_report needs at least one run record")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    groups: dict[str, list[RunRecord]] = defaultdict(list)
    for r in records:
        groups[_group_key(r, group_by)].append(r)
    for name, members in groups.items():
        _check_compatible(name, members)

    written: dict[str, list[Path]] = {"tables": [], "plots": []}
    atomic_write_text(out / "results.csv", results_table(records))
    written["tables"].append(out / "results.csv")

    delta_rows = []
    md = ["| group | method | Avg | Last | F_K |", "|---|---|---|---|---|"]
    for name in sorted(groups):
        members = groups[name]
        by_strategy = defaultdict(lambda: {False: [], True: []})
        for r in members:
            by_strategy[_cfg(r)["strategy"]][bool(_cfg(r)["g2b"])].append(r)
        for strategy in sorted(by_strategy):
            pair = by_strategy[strategy]
            if not pair[False] or not pair[True]:
                continue
            van, g2b = _means(pair[False]), _means(pair[True])
            cells = []
            for metric in ("Avg", "Last", "F_K"):
                if van[metric] is None or g2b[metric] is None:
                    cells.append("")
                    continue
                d = g2b[metric] - van[metric]
                if metric == "F_K":
                    delta_rows.append([name, strategy, metric, f"{van[metric]:.4f}", f"{g2b[metric]:.4f}", f"{d:+.4f}"])
                    cells.append(f"{g2b[metric]:.4f} ({d:+.4f})")
                else:
                    delta_rows.append([name, strategy, metric, _pct(van[metric]), _pct(g2b[metric]), f"{100 * d:+.2f}"])
                    cells.append(format_delta(g2b[metric], d))
            md.append(f"| {name} | {strategy} | {_pct(van['Avg'])} | {_pct(van['Last'])} | "
                      f"{'' if van['F_K'] is None else format(van['F_K'], '.4f')} |")
            md.append(f"| {name} | G2B({strategy}) | " + " | ".join(cells) + " |")
    atomic_write_text(out / "deltas.csv", _csv(DELTA_HEADER, delta_rows))
    atomic_write_text(out / "deltas.md", "\n".join(md) + "\n")
    written["tables"] += [out / "deltas.csv", out / "deltas.md"]

    for name in sorted(groups):
        members = groups[name]
        ref = _cfg(members[0])
        path = out / f"{_safe(ref['dataset'])}_{members[0].accuracy.rounds}r_{_safe(name)}.{image_format}"
        _plot(path, name, members)
        written["plots"].append(path)
    return written


def emit_ablation_report(records: Sequence[RunRecord], out_dir: str | Path) -> list[Path]:
    """Side-branch block ablation table (one row per enablement pattern, seed means)."""
    if not records:
        raise ValueError("emit_ablation_report needs at least one run record")
    _check_compatible("ablation", records)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    by_pattern: dict[tuple[bool, ...], list[RunRecord]] = defaultdict(list)
    n_blocks = None
    for r in records:
        c = _cfg(r)
        pattern = tuple(c["enabled_side_blocks"] or ()) if c["g2b"] else ()
        if c["g2b"] and not pattern:
            pattern = None  # all enabled, resolved below
        by_pattern[pattern].append(r)
        if c["enabled_side_blocks"]:
            n_blocks = len(c["enabled_side_blocks"])
    if None in by_pattern:
        if n_blocks is None:
            raise ValueError("cannot infer block count for fully enabled G2B runs")
        by_pattern[(True,) * n_blocks] += by_pattern.pop(None)
    n_blocks = n_blocks or max((len(p) for p in by_pattern), default=0)

    rows = []
    for pattern in sorted(by_pattern, key=lambda p: (sum(p), p)):
        members = by_pattern[pattern]
        m = _means(members)
        marks = ["x" if (i < len(pattern) and pattern[i]) else "" for i in range(n_blocks)]
        rows.append((marks, mean(r.param_count for r in members), m))
    csv_rows = [
        ["".join("1" if x else "0" for x in marks), f"{p:.4f}", _pct(m["Avg"]), _pct(m["Last"]),
         "" if m["F_K"] is None else f"{m['F_K']:.4f}"]
        for marks, p, m in rows
    ]
    atomic_write_text(out / "ablation.csv", _csv(ABLATION_HEADER, csv_rows))
    head = "| " + " | ".join(str(i + 1) for i in range(n_blocks)) + " | #P (M) | Avg | Last |"
    sep = "|" + "---|" * (n_blocks + 3)
    body = [
        "| " + " | ".join("✓" if x else "" for x in marks) + f" | {p:.4f} | {_pct(m['Avg'])} | {_pct(m['Last'])} |"
        for marks, p, m in rows
    ]
    atomic_write_text(out / "ablation.md", "\n".join([head, sep, *body]) + "\n")
    return [out / "ablation.csv", out / "ablation.md"]
