"""Conjunctive queries over join scopes: predicate types and the
line-oriented workload file format.

Predicates live in original value space.  ``eq`` matches one categorical
value; ``range`` matches an interval with independently open/closed
endpoints; ``outside`` matches the strict complement of a closed interval
(value < lo or value > hi), which is what complement-query construction
produces; ``empty`` matches nothing (the result of clamping a predicate
whose whole range was deleted).
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ValidationError

OPS = ("eq", "range", "outside", "empty")


@dataclass(frozen=True, eq=False)
class Predicate:
    column: str                 # qualified "table.column"
    op: str
    value: float | None = None  # eq
    lo: float | None = None
    hi: float | None = None
    lo_strict: bool = False
    hi_strict: bool = False

    def __post_init__(self):
        if self.op not in OPS:
            raise ValidationError(f"unknown predicate op {self.op!r}")
        if self.op == "eq" and self.value is None:
            raise ValidationError("eq predicate needs a value")
        if self.op in ("range", "outside"):
            if self.lo is None or self.hi is None:
                raise ValidationError(f"{self.op} predicate needs lo and hi")
            if self.hi < self.lo:
                raise ValidationError(f"predicate range [{self.lo}, {self.hi}] inverted")

    @property
    def table(self) -> str:
        return self.column.split(".", 1)[0]

    def matches(self, originals: np.ndarray) -> np.ndarray:
        """Boolean mask over original values."""
        if self.op == "empty":
            return np.zeros(len(originals), dtype=bool)
        if self.op == "eq":
            return originals == self.value
        if self.op == "outside":
            return (originals < self.lo) | (originals > self.hi)
        left = originals > self.lo if self.lo_strict else originals >= self.lo
        right = originals < self.hi if self.hi_strict else originals <= self.hi
        return left & right

    def intervals(self) -> list[tuple[float, float, bool, bool]]:
        """(lo, hi, lo_strict, hi_strict) pieces whose union this predicate
        matches; ``outside`` contributes two unbounded-side pieces."""
        if self.op == "eq":
            return [(float(self.value), float(self.value), False, False)]
        if self.op == "range":
            return [(self.lo, self.hi, self.lo_strict, self.hi_strict)]
        if self.op == "outside":
            return [(-np.inf, self.lo, False, True), (self.hi, np.inf, True, False)]
        return []


@dataclass(frozen=True, eq=False)
class Query:
    qid: int
    scope: tuple[str, ...]          # table names, hub included
    predicates: tuple[Predicate, ...]

    def with_predicates(self, preds) -> "Query":
        return replace(self, predicates=tuple(preds))


def _fmt(v: float) -> str:
    return repr(float(v))


def serialize_query(q: Query) -> str:
    parts = [f"q{q.qid}", "scope=" + ",".join(q.scope)]
    toks = []
    for p in q.predicates:
        if p.op == "eq":
            toks.append(f"{p.column} eq {_fmt(p.value)}")
        elif p.op == "range":
            b = ("(" if p.lo_strict else "[") + (")" if p.hi_strict else "]")
            toks.append(f"{p.column} in{b} {_fmt(p.lo)} {_fmt(p.hi)}")
        elif p.op == "outside":
            toks.append(f"{p.column} outside {_fmt(p.lo)} {_fmt(p.hi)}")
        else:
            toks.append(f"{p.column} empty")
    parts.append(" ; ".join(toks))
    return " | ".join(parts)


def parse_query(line: str) -> Query:
    try:
        head, scope_part, pred_part = [s.strip() for s in line.split("|", 2)]
        qid = int(head.lstrip("q"))
        scope = tuple(scope_part.removeprefix("scope=").split(","))
        preds = []
        if pred_part:
            for tok in pred_part.split(";"):
                fields = tok.split()
                col, op = fields[0], fields[1]
                if op == "eq":
                    preds.append(Predicate(col, "eq", value=float(fields[2])))
                elif op.startswith("in"):
                    b = op[2:]
                    preds.append(Predicate(col, "range", lo=float(fields[2]),
                                           hi=float(fields[3]),
                                           lo_strict=b[0] == "(",
                                           hi_strict=b[1] == ")"))
                elif op == "outside":
                    preds.append(Predicate(col, "outside", lo=float(fields[2]),
                                           hi=float(fields[3])))
                elif op == "empty":
                    preds.append(Predicate(col, "empty"))
                else:
                    raise ValidationError(f"unknown op {op!r}")
        return Query(qid, scope, tuple(preds))
    except (IndexError, ValueError) as exc:
        raise ValidationError(f"cannot parse query line {line!r}: {exc}") from exc


def save_workload(queries: list[Query], path):
    with open(path, "w") as fh:
        for q in queries:
            fh.write(serialize_query(q) + "\n")


def load_workload(path) -> list[Query]:
    out = []
    for line in open(path).read().splitlines():
        if line.strip():
            out.append(parse_query(line))
    return out
