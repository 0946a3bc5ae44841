"""
Report Service - Experiment Outputs on Disk

Writes report.json and the per-series CSV files of an experiment. All writes
happen after the replicas have been reduced, from a single thread.
"""

from pathlib import Path
from typing import Any, Iterable, Sequence
import csv
import logging
import subprocess

from src.core.config import settings
from src.models.schemas import ExperimentReport

logger = logging.getLogger(__name__)


def format_cell(value: Any) -> str:
    """Shortest round-trip decimal for floats, empty for missing values"""
    if value is None:
        return ""
    if hasattr(value, "dtype"):
        return format_cell(value.item())
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def describe_version() -> str:
    """git-describe style version string, falling back to the package version"""
    try:
        result = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=5,
            cwd=Path(__file__).resolve().parent,
        )
    except (OSError, subprocess.SubprocessError) as e:
        logger.debug(f"git describe unavailable: {e}")
        return settings.default_version
    version = result.stdout.strip()
    return version if result.returncode == 0 and version else settings.default_version


class ReportService:
    """Service for writing experiment reports and series tables"""

    def __init__(self, output_dir: Path):
        """
        Initialize report service.

        Args:
            output_dir: Directory receiving every file of one experiment
        """
        self.output_dir = Path(output_dir)

    def _prepare(self) -> None:
        try:
            self.output_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            logger.error(f"Cannot create output directory {self.output_dir}: {e}")
            raise

    def write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        """
        Write a table with a header row and LF line endings.

        Args:
            name: File name inside the output directory
            header: Column names
            rows: Row values; floats are written in shortest round-trip form

        Returns:
            Path of the written file
        """
        self._prepare()
        path = self.output_dir / name
        count = 0
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                if len(row) != len(header):
                    raise ValueError(f"{name}: row of {len(row)} cells under {len(header)} columns")
                writer.writerow([format_cell(cell) for cell in row])
                count += 1
        logger.info(f"Wrote {path} ({count} rows)")
        return path

    def write_report(self, report: ExperimentReport, name: str = "report.json") -> Path:
        """Write the report as indented JSON"""
        self._prepare()
        path = self.output_dir / name
        path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
        logger.info(f"Wrote {path}: {sum(v.passed for v in report.verdicts)}/{len(report.verdicts)} verdicts pass")
        return path

    def path(self, name: str) -> Path:
        """Location of a named output, creating the directory on first use"""
        self._prepare()
        return self.output_dir / name
