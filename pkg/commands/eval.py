"""
Evaluation commands: score tool outputs and aggregate scores into reports.
"""

import argparse
from dataclasses import replace
from pathlib import Path

from commands.base_command import BaseCommand
from core.binfmt import load_binary
from core.errors import HashMismatch, ParseError
from core.evaluator import ADAPTERS, GROUP_FIELDS, REGION_MODES, count_nop_false_positives, normalize_output, score
from core.groundtruth import deserialize
from core.report import read_scores, score_row, write_report, write_scores
from utils.config_manager import config_manager


def _fields(text: str) -> list[str]:
    names = [name.strip() for name in text.split(",") if name.strip()]
    unknown = [name for name in names if name not in GROUP_FIELDS]
    if unknown:
        raise argparse.ArgumentTypeError(f"unknown field(s) {', '.join(unknown)}; choose from {', '.join(GROUP_FIELDS)}")
    return names


class EvalCommands(BaseCommand):
    """`gtforge eval score|report`."""

    name = "eval"
    help = "Score disassembler outputs against ground truth"

    def register(self) -> None:
        score_cmd = self.add_command("score", self.score, "Score prediction files for one binary")
        score_cmd.add_argument("--gt", required=True, type=Path, help="Ground-truth file")
        score_cmd.add_argument("--binary", type=Path, help="The binary (enables nop-region sizing and nop_fp)")
        score_cmd.add_argument("--config", type=Path, help="Project file naming the binary")
        score_cmd.add_argument("--tool", help="Tool name (default: '# tool:' header or file name)")
        score_cmd.add_argument("--adapter", choices=sorted(ADAPTERS), default="generic")
        score_cmd.add_argument("--regions", choices=REGION_MODES, default="count")
        score_cmd.add_argument("--out", required=True, type=Path, help="Scores CSV")
        score_cmd.add_argument("predictions", nargs="+", type=Path, metavar="PRED")

        report = self.add_command("report", self.report, "Aggregate score CSVs into group and wins tables")
        report.add_argument("--out", required=True, type=Path, help="Output directory")
        report.add_argument("--group-by", type=_fields, default=["compiler", "optflag"],
                            help=f"Comma-separated subset of {','.join(GROUP_FIELDS)}")
        report.add_argument("--partition-by", type=_fields, default=["isa", "os"],
                            help="Fields whose value pairs each get their own wins table")
        report.add_argument("scores", nargs="+", type=Path, metavar="SCORES")

    def score(self, args: argparse.Namespace) -> int:
        """
        Score every prediction file and write one CSV row per file.

        Args:
            args: Parsed arguments
        """
        gt = deserialize(args.gt.read_text(encoding="utf-8"))
        binary = args.binary
        if binary is None and args.config is not None:
            binary = config_manager.load(args.config).binary
        img = load_binary(binary) if binary is not None else None
        if img is not None and img.content_hash != gt.binary_hash:
            raise HashMismatch(f"{binary} does not match the ground truth ({gt.binary_hash})")

        rows = []
        for path in args.predictions:
            try:
                raw = path.read_text(encoding="utf-8")
            except UnicodeDecodeError as e:
                raise ParseError(f"{path} is not UTF-8 text: {e}") from e
            preds = normalize_output(raw, args.adapter, gt.isa)
            if not preds.binary_hash:
                self.logger.warning(f"{path} names no binary; assuming it matches the ground truth")
            preds = replace(
                preds,
                tool=args.tool or preds.tool or path.stem,
                binary_hash=preds.binary_hash or gt.binary_hash,
            )
            result = score(gt, preds, img, args.regions)
            nop_fp = count_nop_false_positives(gt, preds, img, args.regions) if img is not None else None
            rows.append(score_row(gt, preds.tool, result, str(binary or ""), nop_fp))

        write_scores(rows, args.out)
        self.table(
            f"Scores for {args.gt.name}",
            ["tool", "tp", "fp", "fn", "precision", "recall", "f1"],
            [[r["tool"], r["tp"], r["fp"], r["fn"], f"{r['precision']:.5f}", f"{r['recall']:.5f}", f"{r['f1']:.5f}"]
             for r in rows],
        )
        return 0

    def report(self, args: argparse.Namespace) -> int:
        frame = read_scores(args.scores)
        if frame.empty:
            raise ParseError("no score rows to report")
        reports = write_report(frame, args.out, args.group_by, args.partition_by)
        for label, report in reports.items():
            self.table(
                f"Wins and harmonic means: {label} ({len(report.groups)} groups)",
                ["metric", *report.tools],
                [[row["metric"], *(f"{row[f'{t}_wins']} {row[f'{t}_hmean']}" for t in report.tools)]
                 for row in report.rows()],
            )
        return 0


def setup(cli) -> None:
    """Setup function to add this command group to the CLI."""
    EvalCommands(cli)
