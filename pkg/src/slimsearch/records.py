"""Per-part training loss records and their JSONL store.

Every supernet training step emits one record per batch part. The stream is
append-only JSONL with a stable field order, so runs can be resumed and files
concatenated without any post-processing.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Iterator

from .errors import RecordError
from .space import WidthConfig

_FIELDS = ("iter", "part", "widths", "loss", "flops", "is_largest")


@dataclass(frozen=True)
class LossRecord:
    """One subnet's raw training loss at one iteration."""

    iteration: int
    part: int
    widths: WidthConfig
    loss: float
    flops: int
    is_largest: bool

    def __post_init__(self) -> None:
        if self.iteration < 0 or self.part < 0:
            raise RecordError("iteration and part must be non-negative")
        if not math.isfinite(self.loss) or self.loss < 0:
            raise RecordError(f"loss must be finite and non-negative, got {self.loss}")
        if self.flops <= 0:
            raise RecordError(f"flops must be positive, got {self.flops}")

    def to_json(self) -> str:
        payload = {
            "iter": self.iteration,
            "part": self.part,
            "widths": list(self.widths),
            "loss": self.loss,
            "flops": self.flops,
            "is_largest": self.is_largest,
        }
        return json.dumps(payload, separators=(", ", ": "))

    @classmethod
    def from_json(cls, line: str) -> "LossRecord":
        try:
            payload = json.loads(line)
        except json.JSONDecodeError as error:
            raise RecordError(f"bad record line: {error}") from error
        missing = [key for key in _FIELDS if key not in payload]
        if missing:
            raise RecordError(f"record line missing fields {missing}")
        return cls(
            iteration=int(payload["iter"]),
            part=int(payload["part"]),
            widths=WidthConfig(tuple(payload["widths"])),
            loss=float(payload["loss"]),
            flops=int(payload["flops"]),
            is_largest=bool(payload["is_largest"]),
        )


class RecordWriter:
    """Streams records to a JSONL file, one line per record, flushed per step."""

    def __init__(self, path: str | Path, append: bool = False):
        self.path = Path(path)
        self._handle: IO[str] = open(self.path, "a" if append else "w")

    def write(self, records: Iterable[LossRecord]) -> None:
        for record in records:
            self._handle.write(record.to_json() + "\n")
        self._handle.flush()

    def close(self) -> None:
        self._handle.close()

    def __enter__(self) -> "RecordWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def write_records(records: Iterable[LossRecord], path: str | Path) -> None:
    with RecordWriter(path) as writer:
        writer.write(records)


def iter_records(path: str | Path) -> Iterator[LossRecord]:
    with open(path) as handle:
        for number, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield LossRecord.from_json(line)
            except RecordError as error:
                raise RecordError(f"{path}: line {number}: {error}") from error


def read_records(path: str | Path) -> list[LossRecord]:
    records = list(iter_records(path))
    if not records:
        raise RecordError(f"{path}: no records")
    return records
