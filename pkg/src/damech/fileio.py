"""Atomic on-disk artifacts: JSON metrics, CSV history, text tables."""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile

from .training import HISTORY_COLUMNS, TrainHistory, TrainRecord


def _write_atomic(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_text_atomic(path: str, text: str) -> None:
    _write_atomic(path, text.encode())


def write_json_atomic(path: str, obj) -> None:
    _write_atomic(path, json.dumps(obj, indent=2, sort_keys=True).encode() + b"\n")


def write_history_csv(path: str, history: TrainHistory) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(HISTORY_COLUMNS)
    for row in history.rows():
        writer.writerow([int(v) if isinstance(v, bool) else v for v in row])
    _write_atomic(path, buf.getvalue().encode())


def read_history_csv(path: str) -> TrainHistory:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != HISTORY_COLUMNS:
            raise ValueError(f"unexpected history header in {path}")
        records = []
        for row in reader:
            kwargs = {}
            for name, raw in zip(HISTORY_COLUMNS, row):
                kind = TrainRecord.__dataclass_fields__[name].type
                if kind == "int":
                    kwargs[name] = int(raw)
                elif kind == "bool":
                    kwargs[name] = raw in ("1", "True", "true")
                else:
                    kwargs[name] = float(raw)
            records.append(TrainRecord(**kwargs))
    return TrainHistory(records=records)
