import csv
import json
import os
import re
import time
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Sequence


def slugify(value: str) -> str:
    value = (value or "").strip().lower()
    if not value:
        return "run"
    value = re.sub(r"[^a-z0-9._-]+", "-", value)
    value = re.sub(r"-{2,}", "-", value)
    return value.strip("-._") or "run"


def _tmp_path(path: Path) -> Path:
    return path.parent / f".{path.name}.tmp.{os.getpid()}.{int(time.time() * 1e9)}"


def _replace_atomically(path: Path, write) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = _tmp_path(path)
    try:
        with open(tmp_path, "w", encoding="utf-8", newline="") as f:
            write(f)
        os.replace(tmp_path, path)
    finally:
        try:
            if tmp_path.exists():
                tmp_path.unlink()
        except Exception:
            pass


def atomic_write_json(path: Path, payload: Any) -> None:
    _replace_atomically(Path(path), lambda f: json.dump(payload, f, indent=2, ensure_ascii=False))


def atomic_write_text(path: Path, text: str) -> None:
    _replace_atomically(Path(path), lambda f: f.write(text))


def read_json(path: Path) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


# --- JSONL ---

def append_jsonl(path: Path, records: Iterable[Dict[str, Any]]) -> None:
    """Appends one JSON object per line. Callers serialize concurrent writers."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record, ensure_ascii=False) + "\n")


def iter_jsonl(path: Path) -> Iterator[Dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON line ({exc})") from exc


def list_files(directory: Path, suffixes: Sequence[str] = (".jsonl",)) -> List[Path]:
    directory = Path(directory)
    if directory.is_file():
        return [directory]
    return sorted(p for p in directory.rglob("*") if p.is_file() and p.suffix in suffixes)


# --- CSV ---

def write_csv(path: Path, fieldnames: Sequence[str], rows: Iterable[Dict[str, Any]]) -> None:
    def _write(f):
        writer = csv.DictWriter(f, fieldnames=list(fieldnames))
        writer.writeheader()
        for row in rows:
            writer.writerow(row)

    _replace_atomically(Path(path), _write)


def read_csv(path: Path) -> List[Dict[str, str]]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))
