"""Multiply-accumulate bookkeeping shared by ops and the profiler.

Ops call :func:`record` with the number of MACs they performed. Counts are
only kept while a :func:`counting` block is active; they are attributed to
whatever scope is on top of the stack (modules push themselves on call).
"""

from __future__ import annotations

import contextlib
from collections import defaultdict

_counter: defaultdict | None = None
_scopes: list = []


def active() -> bool:
    return _counter is not None


def record(macs: int) -> None:
    if _counter is None:
        return
    key = id(_scopes[-1]) if _scopes else None
    _counter[key] += int(macs)


@contextlib.contextmanager
def scope(owner):
    if _counter is None:
        yield
        return
    _scopes.append(owner)
    try:
        yield
    finally:
        _scopes.pop()


@contextlib.contextmanager
def counting():
    """Collect MACs keyed by ``id(scope owner)`` (``None`` for unscoped ops)."""
    global _counter
    prev = _counter
    _counter = defaultdict(int)
    try:
        yield _counter
    finally:
        _counter = prev
