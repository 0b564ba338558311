import csv
import io
import json
import logging
import os
import tempfile
from typing import Any, Iterable, Optional, Sequence, Union

from pydantic import BaseModel

logger = logging.getLogger(__name__)


def write_atomic(path: str, content: str) -> str:
    """Write ``content`` to a temp file in the target folder, then rename over ``path``."""
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=folder, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(content)
        os.replace(tmp_path, path)
    except Exception as e:
        logger.error("[storage] failed to write %s: %s", path, e)
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise
    return path


def save_json(path: str, payload: Union[BaseModel, dict, list]) -> str:
    data: Any = payload.model_dump(mode="json") if isinstance(payload, BaseModel) else payload
    return write_atomic(path, json.dumps(data, indent=2, sort_keys=False) + "\n")


def save_csv(path: str, header: Sequence[str], rows: Iterable[Sequence[Any]],
             comment: Optional[str] = None) -> str:
    buffer = io.StringIO()
    if comment:
        buffer.write(f"# {comment}\n")
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([f"{v:.6g}" if isinstance(v, float) else v for v in row])
    return write_atomic(path, buffer.getvalue())


def save_jsonl(path: str, records: Iterable[BaseModel]) -> str:
    lines = [r.model_dump_json(exclude_none=True) for r in records]
    return write_atomic(path, "".join(line + "\n" for line in lines))
