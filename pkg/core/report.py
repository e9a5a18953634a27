"""
CSV reporting for scores, group summaries and the wins table.
"""

from collections import defaultdict
from pathlib import Path
from typing import Optional, Sequence

import pandas as pd

from core.errors import ParseError
from core.evaluator import (
    GROUP_FIELDS,
    BinaryScore,
    CrossGroupReport,
    GroupKey,
    GroupSummary,
    cross_group_report,
    group_weights,
    summarize_group,
)
from core.groundtruth import GroundTruthDoc
from utils import logger

META_COLUMNS = ["binary", "binary_hash", "tool", *GROUP_FIELDS]
COUNT_COLUMNS = [
    "tp", "fp", "fn", "excluded_optional", "region_matches", "region_misses",
    "excluded_regions", "excluded_out_of_scope", "missync",
]
SCORE_COLUMNS = [*META_COLUMNS, *COUNT_COLUMNS, "precision_undefined", "precision", "recall", "f1", "nop_fp"]
SUMMARY_COLUMNS = ["n", "w_precision", "w_recall", "w_f1", "min_nonzero_f1", "max_f1", "gt_insn_weighted_mean_f1"]


def binary_metadata(gt: GroundTruthDoc) -> dict[str, str]:
    """Grouping fields of one binary, taken from its ground-truth provenance."""
    provenance = gt.provenance
    return {
        "isa": gt.isa.value,
        "os": provenance.note("os") or "unknown",
        "compiler": provenance.compiler,
        "optflag": provenance.optflag,
        "project": provenance.note("project") or "unknown",
    }


def score_row(
    gt: GroundTruthDoc,
    tool: str,
    result: BinaryScore,
    binary: str = "",
    nop_fp: Optional[int] = None,
) -> dict[str, object]:
    row: dict[str, object] = {"binary": binary, "binary_hash": gt.binary_hash, "tool": tool}
    row.update(binary_metadata(gt))
    row.update({column: getattr(result, column) for column in COUNT_COLUMNS})
    row["precision_undefined"] = int(result.precision_undefined)
    row["precision"] = result.precision
    row["recall"] = result.recall
    row["f1"] = result.f1
    row["nop_fp"] = nop_fp
    return row


def write_scores(rows: Sequence[dict[str, object]], path: Path) -> pd.DataFrame:
    frame = pd.DataFrame(list(rows), columns=SCORE_COLUMNS)
    frame["nop_fp"] = frame["nop_fp"].astype("Int64")
    frame.to_csv(path, index=False)
    logger.info(f"✓ Wrote {len(frame)} score row(s) to {path}")
    return frame


def read_scores(paths: Sequence[Path]) -> pd.DataFrame:
    """
    Load and concatenate score CSVs.

    Raises:
        ParseError: A file lacks a required column or has a bad count
    """
    frames = []
    for path in paths:
        frame = pd.read_csv(path, dtype={c: str for c in META_COLUMNS}, keep_default_na=False)
        missing = [c for c in META_COLUMNS + COUNT_COLUMNS if c not in frame.columns]
        if missing:
            raise ParseError(f"{path}: missing column(s) {', '.join(missing)}")
        try:
            frame[COUNT_COLUMNS] = frame[COUNT_COLUMNS].astype(int)
        except ValueError as e:
            raise ParseError(f"{path}: {e}") from e
        frames.append(frame)
    if not frames:
        return pd.DataFrame(columns=SCORE_COLUMNS)
    return pd.concat(frames, ignore_index=True)


def scores_from_frame(frame: pd.DataFrame) -> list[BinaryScore]:
    return [
        BinaryScore(**{column: int(row[column]) for column in COUNT_COLUMNS})
        for _, row in frame.iterrows()
    ]


def summarize_frame(frame: pd.DataFrame, by: Sequence[str]) -> dict[str, list[GroupSummary]]:
    """Group summaries per tool, grouping binaries by the given fields."""
    summaries: dict[str, list[GroupSummary]] = defaultdict(list)
    for keys, group in frame.groupby(["tool", *by], sort=True):
        keys = keys if isinstance(keys, tuple) else (keys,)
        tool, values = keys[0], dict(zip(by, keys[1:]))
        scores = scores_from_frame(group)
        key = GroupKey.select(values, by)
        summaries[tool].append(summarize_group(scores, group_weights(scores), key))
    return dict(summaries)


def groups_frame(summaries: dict[str, list[GroupSummary]], by: Sequence[str]) -> pd.DataFrame:
    rows = []
    for tool in sorted(summaries):
        for summary in summaries[tool]:
            row: dict[str, object] = {"tool": tool}
            row.update({field: getattr(summary.key, field) for field in by})
            row.update({column: getattr(summary, column) for column in SUMMARY_COLUMNS})
            rows.append(row)
    return pd.DataFrame(rows, columns=["tool", *by, *SUMMARY_COLUMNS])


def wins_frame(
    frame: pd.DataFrame,
    group_by: Sequence[str],
    partition_by: Sequence[str],
) -> tuple[pd.DataFrame, dict[str, CrossGroupReport]]:
    """
    Wins and harmonic means per partition, one row per metric.

    Inside each partition (e.g. one ISA/OS pair) binaries are grouped by
    group_by and every tool is compared group by group.
    """
    reports: dict[str, CrossGroupReport] = {}
    rows = []
    partitions = frame.groupby(list(partition_by), sort=True) if partition_by else [((), frame)]
    for keys, part in partitions:
        keys = keys if isinstance(keys, tuple) else (keys,)
        label = "/".join(str(k) for k in keys) or "all"
        report = cross_group_report(summarize_frame(part, group_by))
        reports[label] = report
        rows += [{"partition": label, **row} for row in report.rows()]

    tools = sorted({tool for report in reports.values() for tool in report.tools})
    columns = ["partition", "metric"] + [f"{t}_{kind}" for t in tools for kind in ("wins", "hmean")]
    return pd.DataFrame(rows, columns=columns), reports


def write_report(
    frame: pd.DataFrame,
    out_dir: Path,
    group_by: Sequence[str],
    partition_by: Sequence[str] = ("isa", "os"),
) -> dict[str, CrossGroupReport]:
    """
    Write groups.csv and wins.csv for a set of scores.

    groups.csv has one row per tool and group_by value across all
    partitions; partition_by only splits the wins table.

    Returns:
        dict: Partition label -> cross-group report
    """
    for name in [*group_by, *partition_by]:
        if name not in GROUP_FIELDS:
            raise ValueError(f"cannot group by {name!r}; choose from {', '.join(GROUP_FIELDS)}")
    out_dir.mkdir(parents=True, exist_ok=True)
    groups = groups_frame(summarize_frame(frame, group_by), group_by)
    groups.to_csv(out_dir / "groups.csv", index=False)
    wins, reports = wins_frame(frame, group_by, partition_by)
    wins.to_csv(out_dir / "wins.csv", index=False)
    logger.info(f"✓ Wrote {len(groups)} group row(s) and {len(wins)} wins row(s) to {out_dir}")
    return reports
