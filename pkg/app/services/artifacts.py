"""CSV and JSON artifact writers.

Every CSV row carries ``config_hash`` and ``seed`` columns; every JSON
document carries a top-level ``meta`` block. ``meta.generated_at`` is the
only field that changes between two runs of the same scenario and seed.
"""

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, List, Mapping, Sequence

import numpy as np

logger = logging.getLogger("volterrisk")

TIMESTAMP_FIELD = "generated_at"


def sanitize(value: Any) -> Any:
    """JSON-safe copy: numpy scalars/arrays to Python, NaN and infinities to None."""
    if isinstance(value, Mapping):
        return {str(k): sanitize(v) for k, v in value.items()}
    if isinstance(value, np.ndarray):
        return sanitize(value.tolist())
    if isinstance(value, (list, tuple)):
        return [sanitize(v) for v in value]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        v = float(value)
        return v if math.isfinite(v) else None
    return value


def format_cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        return repr(v) if math.isfinite(v) else ""
    return str(value)


@dataclass
class ArtifactWriter:
    out_dir: Path
    command: str
    config_hash: str
    seed: int
    written: List[Path] = field(default_factory=list)

    def __post_init__(self):
        self.out_dir = Path(self.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)

    @property
    def meta(self) -> dict:
        return {
            "command": self.command,
            "config_hash": self.config_hash,
            "seed": self.seed,
            TIMESTAMP_FIELD: datetime.now(timezone.utc).isoformat(timespec="seconds"),
        }

    def write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        path = self.out_dir / name
        with path.open("w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\r\n", quoting=csv.QUOTE_MINIMAL)
            writer.writerow(list(header) + ["config_hash", "seed"])
            count = 0
            for row in rows:
                writer.writerow([format_cell(v) for v in row] + [self.config_hash, str(self.seed)])
                count += 1
        self.written.append(path)
        logger.info(f"Wrote {path} ({count} rows)")
        return path

    def write_json(self, name: str, payload: Mapping[str, Any]) -> Path:
        path = self.out_dir / name
        document = {"meta": self.meta}
        document.update(sanitize(dict(payload)))
        text = json.dumps(document, sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False)
        path.write_text(text + "\n", encoding="utf-8")
        self.written.append(path)
        logger.info(f"Wrote {path}")
        return path


def strip_timestamp(document: Mapping[str, Any]) -> dict:
    """Copy of a JSON artifact without the timestamp, for reproducibility checks."""
    out = dict(document)
    if isinstance(out.get("meta"), Mapping):
        out["meta"] = {k: v for k, v in out["meta"].items() if k != TIMESTAMP_FIELD}
    return out
