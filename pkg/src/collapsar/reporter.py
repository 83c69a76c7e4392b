"""Run writer - manifest, CSV series, JSON statistics and NDJSON records"""

from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence
import gzip
import io
import json
import logging
import math

import numpy as np

from .ensemble import EnsembleStats
from .lindblad import DensityOperator, to_rows

logger = logging.getLogger(__name__)


def clean(value: Any) -> Any:
    """JSON-ready copy: numpy scalars and arrays become Python values, non-finite floats become None"""
    if isinstance(value, dict):
        return {str(k): clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return [clean(v) for v in value.tolist()]
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, (complex, np.complexfloating)):
        value = complex(value)
        return [value.real, value.imag]
    if hasattr(value, "value") and hasattr(value, "name"):
        return value.value
    return value


def format_number(value: Any) -> str:
    """Shortest round-trip decimal"""
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return repr(float(value))


def to_json(data: Any) -> str:
    return json.dumps(clean(data), indent=2) + "\n"


class RunWriter:
    """Writes the files of one run directory; with ``compress`` every file gets a .gz suffix and a zero mtime"""

    def __init__(self, output_dir: Path, compress: bool = False):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.compress = compress

    def _write(self, name: str, text: str) -> Path:
        data = text.encode("utf-8")
        if self.compress:
            path = self.output_dir / f"{name}.gz"
            buffer = io.BytesIO()
            with gzip.GzipFile(filename="", mode="wb", fileobj=buffer, mtime=0) as f:
                f.write(data)
            data = buffer.getvalue()
        else:
            path = self.output_dir / name
        path.write_bytes(data)
        logger.info(f"Wrote {path}")
        return path

    def write_manifest(self, manifest: Dict[str, Any]) -> Path:
        return self._write("manifest.json", to_json(manifest))

    def write_table(self, name: str, columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        lines = [",".join(columns)]
        lines += [",".join(format_number(v) for v in row) for row in rows]
        return self._write(name, "\n".join(lines) + "\n")

    def write_series(self, stats: EnsembleStats) -> Path:
        return self.write_table("series.csv", stats.columns(), stats.rows())

    def write_stats(self, stats: EnsembleStats, summary: Optional[Dict[str, Any]] = None) -> Path:
        data = stats.to_dict()
        if summary:
            data["summary"] = summary
        return self._write("stats.json", to_json(data))

    def write_records(self, name: str, records: Sequence[Dict[str, Any]]) -> Path:
        lines = [json.dumps(clean(r)) for r in records]
        return self._write(name, "".join(line + "\n" for line in lines))

    def write_density(self, rho: DensityOperator, name: str = "rho.csv") -> Path:
        rows = to_rows(rho)
        return self.write_table(name, ["i", "j", "re", "im"], ([r["i"], r["j"], r["re"], r["im"]] for r in rows))

    def write_json(self, name: str, data: Any) -> Path:
        return self._write(name, to_json(data))

    def write_run(self, manifest: Dict[str, Any], stats: EnsembleStats, formats: Sequence[str],
                  records_name: Optional[str] = None, summary: Optional[Dict[str, Any]] = None) -> Dict[str, Path]:
        """Manifest always; series/stats/records by format"""
        written: Dict[str, Path] = {"manifest": self.write_manifest(manifest)}
        if "csv" in formats:
            written["series"] = self.write_series(stats)
        if "json" in formats:
            written["stats"] = self.write_stats(stats, summary)
        if "ndjson" in formats and records_name:
            written["records"] = self.write_records(records_name, stats.records)
        return written


def read_text(path: Path) -> str:
    """Read a run file written with or without compression"""
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rt", encoding="utf-8") as f:
            return f.read()
    return path.read_text()


def records_from_ndjson(text: str) -> List[Dict[str, Any]]:
    return [json.loads(line) for line in text.splitlines() if line.strip()]
