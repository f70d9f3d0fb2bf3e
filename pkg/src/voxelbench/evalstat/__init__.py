"""DSC metric, descriptive statistics, paired tests, resource metering, reports."""

from .metrics import DescriptiveStats, descriptive, dsc
from .report import (
    ARCHS,
    ComparisonReport,
    DiceRecord,
    dice_csv,
    perf_csv,
    performance_comparison,
    quality_comparison,
    read_dice_csv,
    read_perf_csv,
    render_comparison,
    write_report,
)
from .resources import ResourceRecord, measure_resources
from .significance import (
    PairedTestResult,
    TTestResult,
    WilcoxonResult,
    betainc,
    improvement_percent,
    paired_t_test,
    paired_tests,
    significance_mark,
    wilcoxon_signed_rank,
)

__all__ = [
    "ARCHS",
    "ComparisonReport",
    "DescriptiveStats",
    "DiceRecord",
    "PairedTestResult",
    "ResourceRecord",
    "TTestResult",
    "WilcoxonResult",
    "betainc",
    "descriptive",
    "dice_csv",
    "dsc",
    "improvement_percent",
    "measure_resources",
    "paired_t_test",
    "paired_tests",
    "perf_csv",
    "performance_comparison",
    "quality_comparison",
    "read_dice_csv",
    "read_perf_csv",
    "render_comparison",
    "significance_mark",
    "wilcoxon_signed_rank",
    "write_report",
]
