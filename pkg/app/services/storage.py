"""
Artifact storage for Pitch Kinematics.
Writes tables (CSV or JSON), JSON documents, SVG figures and run manifests.
"""
import csv
import io
import json
import math
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, Field

from app.config import settings
from app.services.errors import DataError
from app.utils.file_utils import ensure_parent, manifest_path
from app.utils.logger import app_logger


TABLE_FORMATS = ("csv", "json")


class RunManifest(BaseModel):
    """Record of one CLI run, stored next to its primary output."""

    command: str
    flags: Dict[str, Any]
    seed: Optional[int] = None
    input_digests: Dict[str, str] = Field(default_factory=dict)
    outputs: List[str] = Field(default_factory=list)
    tool_version: str = settings.APP_VERSION
    started_at: str = Field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    wall_clock_s: float = 0.0
    exit_code: Optional[int] = 0
    error: Optional[str] = None


def _csv_cell(value: Any) -> str:
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _json_value(value: Any) -> Any:
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def format_table(rows: Sequence[Mapping[str, Any]], columns: Sequence[str], fmt: str = "csv") -> str:
    """
    Render rows as CSV (header plus one line per row) or as a JSON array.

    Raises:
        DataError: Unknown format
    """
    if fmt not in TABLE_FORMATS:
        raise DataError(f"Unknown table format '{fmt}'. Supported: {', '.join(TABLE_FORMATS)}")
    if fmt == "json":
        records = [{c: _json_value(row[c]) for c in columns} for row in rows]
        return json.dumps(records, indent=2) + "\n"

    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_csv_cell(row[c]) for c in columns])
    return out.getvalue()


class LocalArtifactStore:
    """Writes artifacts to the local file system."""

    def __init__(self, base_dir: Optional[Union[str, Path]] = None):
        """
        Args:
            base_dir: Directory that relative paths resolve against
                (current directory when omitted)
        """
        self.base_dir = Path(base_dir) if base_dir is not None else None

    def resolve(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        if self.base_dir is not None and not path.is_absolute():
            path = self.base_dir / path
        return path

    def write_text(self, path: Union[str, Path], text: str) -> Path:
        target = ensure_parent(self.resolve(path))
        target.write_text(text, encoding="utf-8")
        app_logger.debug(f"Wrote {target} ({len(text)} chars)")
        return target

    def write_table(
        self,
        path: Union[str, Path],
        rows: Sequence[Mapping[str, Any]],
        columns: Sequence[str],
        fmt: str = "csv",
    ) -> Path:
        return self.write_text(path, format_table(rows, columns, fmt))

    def write_json(self, path: Union[str, Path], document: Union[str, BaseModel, Mapping]) -> Path:
        if isinstance(document, BaseModel):
            text = document.model_dump_json(indent=2)
        elif isinstance(document, str):
            text = document
        else:
            text = json.dumps(document, indent=2, default=_json_value)
        return self.write_text(path, text)

    def write_svg(self, path: Union[str, Path], svg: str) -> Path:
        if not svg.lstrip().startswith(("<?xml", "<svg")):
            raise DataError("Figure is not an SVG document")
        return self.write_text(path, svg)

    def write_manifest(self, output_path: Union[str, Path], manifest: RunManifest) -> Path:
        """Store `manifest` as `<output>.manifest.json`."""
        return self.write_json(manifest_path(self.resolve(output_path)), manifest)


# Global artifact store instance
storage = LocalArtifactStore()
