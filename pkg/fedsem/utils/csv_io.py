"""
utils/csv_io.py
---------------

CSV and binary file helpers shared by the services.

CSV files are UTF-8 with LF line endings and shortest round-trip float
representation, so that identical inputs give byte-identical files.
"""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import pandas as pd


def write_csv(path: str | Path, frame: pd.DataFrame) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n", encoding="utf-8")
    return path


def write_rows(path: str | Path, columns: Sequence[str], rows: Iterable[Sequence]) -> Path:
    return write_csv(path, pd.DataFrame(list(rows), columns=list(columns)))


def read_csv(path: str | Path, *, dtype: Optional[dict] = None,
             keep_default_na: bool = True) -> pd.DataFrame:
    return pd.read_csv(
        path,
        encoding="utf-8",
        float_precision="round_trip",
        dtype=dtype,
        keep_default_na=keep_default_na,
    )


def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def relative_files(root: str | Path, exclude: Sequence[str] = ()) -> List[str]:
    """Files under ``root`` as sorted POSIX-style relative paths."""
    root = Path(root)
    out = []
    for p in sorted(root.rglob("*")):
        if p.is_file():
            rel = p.relative_to(root).as_posix()
            if rel not in exclude:
                out.append(rel)
    return out
