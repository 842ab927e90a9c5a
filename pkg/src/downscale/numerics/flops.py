"""Analytic multiply-add accounting.

Primitives credit the innermost open scope of the calling thread. Closing a
scope folds its counts into the enclosing one, so an outer ledger covers
everything executed inside it. Worker threads open their own scopes and the
coordinating thread merges their ledgers with :func:`credit_ledger`.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import asdict, dataclass

CATEGORIES = ("attention", "matmul", "conv", "other")

_local = threading.local()


@dataclass
class FlopLedger:
    attention: int = 0
    matmul: int = 0
    conv: int = 0
    other: int = 0

    def add(self, category: str, madds: int) -> None:
        if category not in CATEGORIES:
            raise KeyError(f"unknown flop category {category!r}")
        if madds < 0:
            raise ValueError("multiply-add counts are non-negative")
        setattr(self, category, getattr(self, category) + int(madds))

    def merge(self, other: "FlopLedger") -> None:
        for cat in CATEGORIES:
            self.add(cat, getattr(other, cat))

    @property
    def total(self) -> int:
        return sum(getattr(self, c) for c in CATEGORIES)

    def as_dict(self) -> dict:
        return asdict(self)


def _stack() -> list:
    st = getattr(_local, "stack", None)
    if st is None:
        st = _local.stack = []
    return st


def credit(category: str, madds: int) -> None:
    st = _stack()
    if st:
        st[-1].add(category, madds)


def credit_ledger(ledger: FlopLedger) -> None:
    """Fold a ledger recorded elsewhere (e.g. on a worker thread) into the current scope."""
    st = _stack()
    if st:
        st[-1].merge(ledger)


@contextmanager
def flop_scope():
    ledger = FlopLedger()
    st = _stack()
    st.append(ledger)
    try:
        yield ledger
    finally:
        st.pop()
        if st:
            st[-1].merge(ledger)


@contextmanager
def isolated_scope():
    """A scope that does not fold into the enclosing one; merge it explicitly."""
    saved = _stack()
    _local.stack = []
    try:
        with flop_scope() as ledger:
            yield ledger
    finally:
        _local.stack = saved


def with_flop_ledger(f, *args, **kwargs):
    """Run ``f`` and return ``(result, ledger)`` covering every primitive it executed."""
    with flop_scope() as ledger:
        result = f(*args, **kwargs)
    return result, ledger
