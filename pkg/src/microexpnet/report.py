"""Plain-text tables for experiment records and benchmark reports."""

from __future__ import annotations

from typing import Iterable, Mapping, Sequence


def _table(headers: Sequence[str], rows: Sequence[Sequence], align=None) -> str:
    cells = [[str(v) for v in row] for row in rows]
    widths = [
        max(len(headers[i]), *(len(r[i]) for r in cells)) if cells else len(headers[i])
        for i in range(len(headers))
    ]
    align = align or ["<"] * len(headers)

    def fmt(row):
        return "  ".join(f"{v:{align[i]}{widths[i]}}" for i, v in enumerate(row)).rstrip()

    lines = [fmt(headers), fmt(["-" * w for w in widths])]
    lines.extend(fmt(row) for row in cells)
    return "\n".join(lines)


def _label(record: Mapping) -> str:
    return f"{record['size_class'].upper()}/{record['variant']}"


def _pct(value: float) -> str:
    return f"{100.0 * value:.2f}"


def render_results_table(records: Iterable[Mapping]) -> str:
    """One row per record: configuration, mean accuracy, fold spread."""
    rows = []
    for r in records:
        t = r.get("temperature")
        accs = r["fold_accuracies"]
        rows.append(
            [
                _label(r),
                r["mode"],
                "-" if t is None else f"{t:g}",
                "-" if r.get("lambda") is None else f"{r['lambda']:g}",
                f"{r['parameter_count']:,}",
                _pct(r["mean_accuracy"]),
                f"{_pct(min(accs))}..{_pct(max(accs))}",
            ]
        )
    return _table(
        ["model", "mode", "T", "lambda", "params", "mean acc %", "fold range %"],
        rows,
        align=["<", "<", ">", ">", ">", ">", ">"],
    )


def render_sweep_table(records: Iterable[Mapping]) -> str:
    """Accuracy against temperature, best row starred."""
    rows = []
    for r in records:
        rows.append(
            [
                f"{r['temperature']:g}",
                _pct(r["mean_accuracy"]),
                "*" if r.get("best") else "",
            ]
        )
    return _table(["T", "mean acc %", "best"], rows, align=[">", ">", "<"])


def render_pooling_table(records: Iterable[Mapping]) -> str:
    """Variant comparison, one block per evaluation mode."""
    by_mode: dict[str, list[Mapping]] = {}
    for r in records:
        by_mode.setdefault(r["mode"], []).append(r)
    blocks = []
    for mode, group in by_mode.items():
        rows = [
            [
                _label(r),
                f"{r['parameter_count']:,}",
                _pct(r["mean_accuracy"]),
            ]
            for r in group
        ]
        blocks.append(
            f"mode: {mode}\n"
            + _table(["model", "params", "mean acc %"], rows, align=["<", ">", ">"])
        )
    return "\n\n".join(blocks)


def render_bench_table(reports: Iterable[Mapping]) -> str:
    rows = []
    for r in reports:
        rows.append(
            [
                f"{r['size_class'].upper()}/{r['variant']}",
                f"{r['parameters']:,}",
                f"{r['mean_ms']:.3f}",
                f"{r['median_ms']:.3f}",
                f"{r['p99_ms']:.3f}",
                f"{r['fps']:.0f}",
            ]
        )
    return _table(
        ["model", "params", "mean ms", "median ms", "p99 ms", "fps"],
        rows,
        align=["<", ">", ">", ">", ">", ">"],
    )
