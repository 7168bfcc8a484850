"""
File utility functions for Pitch Kinematics.
Input digests, output paths and directory handling.
"""
import hashlib
import os
from pathlib import Path
from typing import Dict, Iterable, Optional, Union

from app.services.errors import DataError


PathLike = Union[str, Path]


def calculate_checksum(file_path: PathLike) -> str:
    """
    Calculate the SHA-256 digest of a file.

    Args:
        file_path: Path to file

    Returns:
        Hex digest

    Raises:
        DataError: If the file does not exist
    """
    if not os.path.isfile(file_path):
        raise DataError(f"Input file not found: {file_path}")

    sha256_hash = hashlib.sha256()
    with open(file_path, "rb") as f:
        # Read in chunks to handle large files
        for byte_block in iter(lambda: f.read(65536), b""):
            sha256_hash.update(byte_block)
    return sha256_hash.hexdigest()


def input_digests(paths: Iterable[Optional[PathLike]]) -> Dict[str, str]:
    """Map each given input path to its SHA-256 digest, skipping None."""
    return {str(p): calculate_checksum(p) for p in paths if p is not None}


def read_text(file_path: PathLike) -> str:
    """Read a UTF-8 input file, raising DataError when it is missing."""
    try:
        return Path(file_path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"Input file not found: {file_path}")
    except UnicodeDecodeError as e:
        raise DataError(f"Input file is not UTF-8 text: {file_path} ({e.reason})")


def ensure_directory(directory: PathLike) -> None:
    """Ensure directory exists, create if not."""
    os.makedirs(directory, exist_ok=True)


def ensure_parent(file_path: PathLike) -> Path:
    """Create the parent directory of `file_path` and return it as a Path."""
    path = Path(file_path)
    if path.parent != Path(""):
        ensure_directory(path.parent)
    return path


def manifest_path(output_path: PathLike) -> Path:
    """Manifest written next to a primary output: `<output>.manifest.json`."""
    path = Path(output_path)
    return path.with_name(path.name + ".manifest.json")


def sibling_path(output_path: PathLike, suffix: str) -> Path:
    """`<stem><suffix>` next to `output_path`, e.g. `est.csv` -> `est.model.json`."""
    path = Path(output_path)
    return path.with_name(path.stem + suffix)
