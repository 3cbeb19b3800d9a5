import csv
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["suite", "strategy", "variant_param", "seed", "task", "score", "steps", "wall_clock_s",
                  "config_hash", "status"]
LOSS_COLUMNS = ["step", "action", "latent", "total", "lr"]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def write_report(path, rows: Iterable[Dict], include_wall_clock: bool = False) -> Path:
    """
    Write suite result rows as CSV.

    wall_clock_s stays empty unless ``include_wall_clock`` so reruns of the same
    config produce byte-identical files.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            values = dict(row)
            if not include_wall_clock:
                values["wall_clock_s"] = None
            writer.writerow([_fmt(values.get(column)) for column in REPORT_COLUMNS])
            count += 1
    logger.info(f"Report with {count} rows written to {path}")
    return path


def read_report(path) -> List[Dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def write_loss_log(path, entries: Sequence[Dict[str, Optional[float]]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(LOSS_COLUMNS)
        for entry in entries:
            writer.writerow([_fmt(entry.get(column)) for column in LOSS_COLUMNS])
    return path
