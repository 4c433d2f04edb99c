"""Instrumented multiply-add and allocation counting for operator kernels."""

from collections import Counter
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Iterator

_active: ContextVar["OpCounter | None"] = ContextVar("active_op_counter", default=None)


@dataclass
class OpCounter:
    """Exact scalar operation counts, tagged by the term that produced them."""

    kind: str = ""
    params: dict[str, int] = field(default_factory=dict)
    counts: Counter = field(default_factory=Counter)
    allocated_bytes: int = 0

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def add(self, tag: str, count: int) -> None:
        self.counts[tag] += int(count)

    def allocate(self, nbytes: int) -> None:
        self.allocated_bytes += int(nbytes)


@contextmanager
def counting(counter: OpCounter) -> Iterator[OpCounter]:
    token = _active.set(counter)
    try:
        yield counter
    finally:
        _active.reset(token)


def record(tag: str, count: int) -> None:
    counter = _active.get()
    if counter is not None:
        counter.add(tag, count)


def record_alloc(*arrays) -> None:
    counter = _active.get()
    if counter is not None:
        for array in arrays:
            counter.allocate(array.nbytes)
