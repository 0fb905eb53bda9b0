# app/db/base.py
import os
import tempfile
import threading
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence, Union

from loguru import logger

from app.core.config import settings
from app.core.exceptions import DataFileError
from app.core.logger import log_file_write
from app.utils.formatting import to_csv, to_json


class ResultStore:
    """Single writer for every result file of a run.

    Files are written to a temporary sibling and renamed into place, so a
    failing command never leaves a partial file behind.
    """

    def __init__(self, root: Optional[Union[str, Path]] = None):
        self.root = Path(root or settings.OUTPUT_DIR)
        self._lock = threading.Lock()
        self.written: list = []

    def set_root(self, root: Union[str, Path]) -> None:
        self.root = Path(root)

    def path(self, name: Union[str, Path]) -> Path:
        p = Path(name)
        return p if p.is_absolute() else self.root / p

    def _atomic_write(self, target: Path, payload: bytes, kind: str, rows: Optional[int] = None) -> Path:
        with self._lock:
            tmp_name = None
            try:
                target.parent.mkdir(parents=True, exist_ok=True)
                fd, tmp_name = tempfile.mkstemp(prefix=f".{target.name}.", suffix=".tmp", dir=target.parent)
                with os.fdopen(fd, "wb") as handle:
                    handle.write(payload)
                    handle.flush()
                    os.fsync(handle.fileno())
                os.replace(tmp_name, target)
            except OSError as e:
                if tmp_name and os.path.exists(tmp_name):
                    os.unlink(tmp_name)
                log_file_write(str(target), kind, rows, error=str(e))
                raise DataFileError(f"could not write {target}: {e}", path=str(target))
            self.written.append(target)
        log_file_write(str(target), kind, rows)
        return target

    def write_csv(self, name: Union[str, Path], header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        rows = list(rows)
        return self._atomic_write(self.path(name), to_csv(header, rows).encode("utf-8"), "csv", len(rows))

    def write_json(self, name: Union[str, Path], obj: Any) -> Path:
        return self._atomic_write(self.path(name), to_json(obj), "json")

    def reset(self) -> None:
        with self._lock:
            self.written = []
        logger.debug(f"Result store rooted at {self.root}")


# Singleton
store = ResultStore()
