"""Per-organ comparison of the two architectures: CSV files and text tables.

Paired differences are always ``rank2 - rank3``.
"""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import ORGANS
from .metrics import DescriptiveStats, descriptive
from .resources import ResourceRecord
from .significance import PairedTestResult, improvement_percent, paired_tests

ARCHS = ("rank2", "rank3")
ARCH_LABELS = {"rank2": "2D U-Net", "rank3": "3D U-Net"}


@dataclass(frozen=True)
class DiceRecord:
    case_id: str
    organ: str
    arch: str
    dsc: float

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"architecture must be one of {ARCHS}, got {self.arch!r}")
        if not 0.0 <= self.dsc <= 1.0:
            raise ValueError(f"DSC outside [0, 1]: {self.dsc}")


def organ_order(names) -> list[str]:
    rank = {o: i for i, o in enumerate(ORGANS)}
    return sorted(set(names), key=lambda o: (rank.get(o, len(rank)), o))


def _num(v: float) -> str:
    return repr(float(v))


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# CSV files


def dice_csv(records) -> str:
    return _csv_text(
        ("case_id", "organ", "arch", "dsc"),
        [(r.case_id, r.organ, r.arch, _num(r.dsc)) for r in records],
    )


def read_dice_csv(path) -> list[DiceRecord]:
    with open(path, newline="") as fh:
        return [
            DiceRecord(row["case_id"], row["organ"], row["arch"], float(row["dsc"]))
            for row in csv.DictReader(fh)
        ]


def perf_csv(resources) -> str:
    return _csv_text(
        ("organ", "arch", "phase", "peak_mib", "seconds"),
        [
            (r.organ, r.architecture, r.phase, _num(r.peak_memory_mib), _num(r.wall_time_seconds))
            for r in resources
        ],
    )


def read_perf_csv(path) -> list[ResourceRecord]:
    with open(path, newline="") as fh:
        return [
            ResourceRecord(
                row["phase"], float(row["peak_mib"]), float(row["seconds"]), row["arch"], row["organ"]
            )
            for row in csv.DictReader(fh)
        ]


# ---------------------------------------------------------------------------
# quality comparison


@dataclass
class ComparisonReport:
    stats: dict[tuple[str, str], DescriptiveStats]
    tests: dict[str, PairedTestResult]
    gaps: list[str]
    quality_text: str
    performance_text: str = ""
    stats_csv: str = ""
    tests_csv: str = ""
    performance_rows: list[list[str]] = field(default_factory=list)


def _paired_by_case(records, organ: str) -> tuple[np.ndarray, np.ndarray]:
    by_arch = {a: {} for a in ARCHS}
    for r in records:
        if r.organ == organ:
            by_arch[r.arch][r.case_id] = r.dsc
    common = sorted(set(by_arch["rank2"]) & set(by_arch["rank3"]))
    return (
        np.array([by_arch["rank2"][c] for c in common]),
        np.array([by_arch["rank3"][c] for c in common]),
    )


def _cell(text: str, bold: bool, mark: str = "") -> str:
    if not bold:
        return text
    return f"**{text}**" + (f"^{mark}" if mark else "")


def _favored(v2: float, v3: float, higher_is_better: bool) -> str | None:
    if v2 == v3 or math.isnan(v2) or math.isnan(v3):
        return None
    better2 = v2 > v3 if higher_is_better else v2 < v3
    return "rank2" if better2 else "rank3"


def _markdown(header, rows) -> str:
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    line = lambda r: "| " + " | ".join(str(c).ljust(w) for c, w in zip(r, widths)) + " |"
    sep = "|" + "|".join("-" * (w + 2) for w in widths) + "|"
    return "\n".join([line(header), sep] + [line(r) for r in rows]) + "\n"


def _fmt_num(v: float, digits: int) -> str:
    return "nan" if math.isnan(v) else f"{v:.{digits}f}"


def quality_comparison(records, digits: int = 3) -> ComparisonReport:
    records = list(records)
    organs = organ_order(r.organ for r in records)
    stats, tests, gaps = {}, {}, []
    for organ in organs:
        for arch in ARCHS:
            vals = [r.dsc for r in records if r.organ == organ and r.arch == arch]
            if vals:
                stats[(organ, arch)] = descriptive(vals)
            else:
                gaps.append(f"{organ}: no {arch} records")
        if (organ, "rank2") in stats and (organ, "rank3") in stats:
            a, b = _paired_by_case(records, organ)
            if len(a):
                tests[organ] = paired_tests(a, b)
            else:
                gaps.append(f"{organ}: no case scored by both architectures")

    rows = []
    for organ in organs:
        s2, s3 = stats.get((organ, "rank2")), stats.get((organ, "rank3"))
        if s2 is None or s3 is None:
            rows.append([organ] + ["n/a"] * 4)
            continue
        test = tests.get(organ)
        row = [organ]
        for attr, spread, sym, mark_attr in (
            ("mean", "std", "±", "t_mark"),
            ("median", "iqr", "~", "wilcoxon_mark"),
        ):
            fav = _favored(getattr(s2, attr), getattr(s3, attr), True)
            mark = getattr(test, mark_attr) if test else ""
            for arch, s in (("rank2", s2), ("rank3", s3)):
                text = f"{_fmt_num(getattr(s, attr), digits)}{sym}{_fmt_num(getattr(s, spread), digits)}"
                row.append(_cell(text, fav == arch, mark))
        rows.append(row)
    header = [
        "Organ",
        "Mean±Std 2D",
        "Mean±Std 3D",
        "Median~IQR 2D",
        "Median~IQR 3D",
    ]
    text = _markdown(header, rows)
    if gaps:
        text += "\n" + "\n".join(f"gap: {g}" for g in gaps) + "\n"

    stats_rows = []
    for organ in organs:
        for arch in ARCHS:
            s = stats.get((organ, arch))
            if s is not None:
                stats_rows.append(
                    (organ, arch, _num(s.mean), _num(s.std), _num(s.median), _num(s.iqr), s.n)
                )
    test_rows = [
        (o, _num(t.t_statistic), _num(t.t_p_value), _num(t.wilcoxon_w), _num(t.wilcoxon_p), t.mark)
        for o, t in tests.items()
    ]
    return ComparisonReport(
        stats,
        tests,
        gaps,
        text,
        stats_csv=_csv_text(("organ", "arch", "mean", "std", "median", "iqr", "n"), stats_rows),
        tests_csv=_csv_text(("organ", "t", "t_p", "w", "w_p", "mark"), test_rows),
    )


# ---------------------------------------------------------------------------
# performance comparison

_PERF_METRICS = (
    ("training", "peak_memory_mib", "Training [MiB]"),
    ("application", "peak_memory_mib", "Application [MiB]"),
    ("training", "wall_time_seconds", "Training [min:sec]"),
    ("application", "wall_time_seconds", "Application [sec]"),
)


def _fmt_perf(v: float, phase: str, attr: str) -> str:
    if math.isnan(v):
        return "nan"
    if attr == "peak_memory_mib":
        return f"{v:.1f}"
    if phase == "training":
        minutes, seconds = divmod(round(v, 1), 60)
        return f"{int(minutes)}:{seconds:04.1f}"
    return f"{v:.2f}"


def organ_resource_table(resources) -> dict[tuple[str, str, str, str], float]:
    """Mean value per (organ, arch, phase, attribute) over all matching records."""
    acc = defaultdict(list)
    for r in resources:
        for attr in ("peak_memory_mib", "wall_time_seconds"):
            acc[(r.organ, r.architecture, r.phase, attr)].append(getattr(r, attr))
    return {k: float(np.mean(v)) for k, v in acc.items()}


def _summary_marks(v2: np.ndarray, v3: np.ndarray) -> tuple[str, str]:
    """Marks for the mean row (t-test) and the median row (signed-rank test).

    Differences without any spread are reported as maximally significant on
    both rows: there is no variation left for a test to weigh.
    """
    d = v2 - v3
    if len(d) and np.all(d == d[0]) and d[0] != 0:
        return "***", "***"
    test = paired_tests(v2, v3)
    return test.t_mark, test.wilcoxon_mark


def performance_comparison(resources) -> tuple[str, list[list[str]]]:
    resources = list(resources)
    table = organ_resource_table(resources)
    organs = organ_order(r.organ for r in resources)
    header = ["Organ"] + [f"{label} {a}" for _, _, label in _PERF_METRICS for a in ("2D", "3D")]
    rows = []
    columns = {}
    for phase, attr, _ in _PERF_METRICS:
        for arch in ARCHS:
            columns[(phase, attr, arch)] = np.array(
                [table.get((o, arch, phase, attr), math.nan) for o in organs]
            )
    for i, organ in enumerate(organs):
        row = [organ]
        for phase, attr, _ in _PERF_METRICS:
            for arch in ARCHS:
                row.append(_fmt_perf(columns[(phase, attr, arch)][i], phase, attr))
        rows.append(row)

    mean_row, median_row = ["Mean±Std"], ["Median~IQR"]
    mean_imp, median_imp = ["Mean Improvement"], ["Median Improvement"]
    for phase, attr, _ in _PERF_METRICS:
        v2, v3 = columns[(phase, attr, "rank2")], columns[(phase, attr, "rank3")]
        ok = ~(np.isnan(v2) | np.isnan(v3))
        v2, v3 = v2[ok], v3[ok]
        if len(v2) == 0:
            mean_row += ["n/a"] * 2
            median_row += ["n/a"] * 2
            mean_imp += ["n/a"] * 2
            median_imp += ["n/a"] * 2
            continue
        s2, s3 = descriptive(v2), descriptive(v3)
        t_mark, w_mark = _summary_marks(v2, v3)
        fmt = lambda v: _fmt_perf(v, phase, attr)
        fmt_spread = lambda v: "0" if v == 0 else fmt(v)
        for stat, spread, sym, mark, out, imp in (
            ("mean", "std", "±", t_mark, mean_row, mean_imp),
            ("median", "iqr", "~", w_mark, median_row, median_imp),
        ):
            a, b = getattr(s2, stat), getattr(s3, stat)
            fav = _favored(a, b, False)
            for arch, s in (("rank2", s2), ("rank3", s3)):
                sp = getattr(s, spread)
                text = f"{fmt(getattr(s, stat))}{sym}{fmt_spread(0.0 if math.isnan(sp) else sp)}"
                out.append(_cell(text, fav == arch, mark))
            if fav is None:
                imp += ["100.00%", "100.00%"]
            else:
                lo, hi = (a, b) if fav == "rank2" else (b, a)
                pct = f"**{improvement_percent(lo, hi):.2f}%**" if lo > 0 else "n/a"
                imp += [pct, "N/A"] if fav == "rank2" else ["N/A", pct]
    rows += [mean_row, median_row, mean_imp, median_imp]
    return _markdown(header, rows), [header] + rows


def render_comparison(records, tests=None, resources=()) -> ComparisonReport:
    """Quality table (DSC per organ) and performance table (resources per organ).

    ``tests`` may carry precomputed per-organ paired tests; by default they are
    derived from ``records``.
    """
    report = quality_comparison(records)
    if tests is not None:
        report.tests = dict(tests)
    resources = list(resources)
    if resources:
        report.performance_text, report.performance_rows = performance_comparison(resources)
    return report


def write_report(out_dir, records, resources=()) -> ComparisonReport:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = list(records)
    resources = list(resources)
    report = render_comparison(records, resources=resources)
    (out / "dice.csv").write_text(dice_csv(records))
    (out / "stats.csv").write_text(report.stats_csv)
    (out / "tests.csv").write_text(report.tests_csv)
    (out / "quality.md").write_text(report.quality_text)
    if resources:
        (out / "perf.csv").write_text(perf_csv(resources))
        (out / "performance.md").write_text(report.performance_text)
        (out / "performance_table.csv").write_text(
            _csv_text(report.performance_rows[0], report.performance_rows[1:])
        )
    return report
