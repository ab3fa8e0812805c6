"""Typed in-memory star-schema relations: tables, deletion splits, joins.

Tables are stored columnar.  Categorical cells hold dense dictionary codes
(0..n-1) with a per-column code -> original-value map; numerical cells hold
raw values inside declared bounds.  Join graphs are trees rooted at a hub
(fact) table with complete foreign-key coverage, so the inner join equals
the full outer join and never exceeds the hub's row count.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import (ConfigurationError, EmptyRelationError, SizeError,
                     ValidationError)

CATEGORICAL = "categorical"
NUMERICAL = "numerical"

JOIN_CAP_DEFAULT = 5_000_000


@dataclass(frozen=True, eq=False)
class ColumnSpec:
    name: str
    kind: str
    dictionary: np.ndarray | None = None  # categorical: code -> original value
    lo: float = 0.0                       # numerical bounds
    hi: float = 0.0
    distinct_values: np.ndarray | None = None  # numerical: sorted values present

    def __post_init__(self):
        if self.kind not in (CATEGORICAL, NUMERICAL):
            raise ValidationError(f"unknown column kind {self.kind!r}")
        if self.kind == CATEGORICAL:
            if self.dictionary is None or len(self.dictionary) == 0:
                raise ValidationError(f"categorical column {self.name!r} needs a dictionary")
        else:
            if self.hi < self.lo:
                raise ValidationError(f"column {self.name!r}: hi < lo")

    @property
    def domain_size(self) -> int:
        if self.kind == CATEGORICAL:
            return len(self.dictionary)
        raise ValidationError(f"{self.name!r} has a continuous domain")

    def code_of(self, original_value) -> int | None:
        """Dense code for an original categorical value, or None if absent."""
        hits = np.nonzero(self.dictionary == original_value)[0]
        return int(hits[0]) if hits.size else None


@dataclass(eq=False)
class TableData:
    name: str
    columns: list[ColumnSpec]
    data: list[np.ndarray]

    def __post_init__(self):
        if len(self.columns) != len(self.data):
            raise ValidationError(f"table {self.name!r}: column/data length mismatch")
        n = self.row_count
        for spec, col in zip(self.columns, self.data):
            if len(col) != n:
                raise ValidationError(f"table {self.name!r}: ragged column {spec.name!r}")

    @property
    def row_count(self) -> int:
        return 0 if not self.data else len(self.data[0])

    def column(self, name: str) -> np.ndarray:
        return self.data[self._index(name)]

    def spec(self, name: str) -> ColumnSpec:
        return self.columns[self._index(name)]

    def _index(self, name: str) -> int:
        for i, spec in enumerate(self.columns):
            if spec.name == name:
                return i
        raise ConfigurationError(f"unknown column {name!r} in table {self.name!r}")

    def take(self, idx: np.ndarray) -> "TableData":
        return TableData(self.name, self.columns, [col[idx] for col in self.data])

    def validate_cells(self):
        for spec, col in zip(self.columns, self.data):
            if spec.kind == CATEGORICAL:
                if col.size and (col.min() < 0 or col.max() >= spec.domain_size):
                    raise ValidationError(
                        f"{self.name}.{spec.name}: code outside 0..{spec.domain_size - 1}")
            else:
                if col.size and (col.min() < spec.lo or col.max() > spec.hi):
                    raise ValidationError(
                        f"{self.name}.{spec.name}: value outside [{spec.lo}, {spec.hi}]")


@dataclass(frozen=True, eq=False)
class Join:
    child: str      # referencing table (nearer the hub)
    fk: str
    parent: str     # referenced table
    pk: str


@dataclass(eq=False)
class SchemaGraph:
    tables: list[TableData]
    joins: list[Join]
    hub: str

    def table(self, name: str) -> TableData:
        for t in self.tables:
            if t.name == name:
                return t
        raise ConfigurationError(f"unknown table {name!r}")

    def table_names(self) -> list[str]:
        return [t.name for t in self.tables]

    def key_columns(self, table: str) -> set[str]:
        keys = set()
        for j in self.joins:
            if j.child == table:
                keys.add(j.fk)
            if j.parent == table:
                keys.add(j.pk)
        return keys

    def validate(self):
        names = self.table_names()
        if len(set(names)) != len(names):
            raise ValidationError("duplicate table names")
        if self.hub not in names:
            raise ConfigurationError(f"hub table {self.hub!r} missing")
        if len(self.joins) != len(names) - 1:
            raise ValidationError("join graph is not a tree (edge count)")
        # connectivity of the undirected join graph
        adj = {n: set() for n in names}
        for j in self.joins:
            adj[j.child].add(j.parent)
            adj[j.parent].add(j.child)
        seen, stack = set(), [self.hub]
        while stack:
            n = stack.pop()
            if n in seen:
                continue
            seen.add(n)
            stack.extend(adj[n] - seen)
        if seen != set(names):
            raise ValidationError("join graph is not connected")
        if any(j.parent == self.hub for j in self.joins):
            raise ValidationError("hub must not be referenced as a parent")
        for j in self.joins:
            child, parent = self.table(j.child), self.table(j.parent)
            pk = parent.column(j.pk)
            if len(np.unique(pk)) != len(pk):
                raise ValidationError(f"{j.parent}.{j.pk} is not unique")
            fk = child.column(j.fk)
            if fk.size and not np.isin(fk, pk).all():
                raise ValidationError(
                    f"incomplete FK coverage: {j.child}.{j.fk} -> {j.parent}.{j.pk}")
        for t in self.tables:
            t.validate_cells()


# ---------------------------------------------------------------------------
# deletion tasks


@dataclass(frozen=True, eq=False)
class Condition:
    """Per-table deletion condition.

    Attribute tasks give a column plus either an equality value or an
    inclusive [lo, hi] range over original values; random tasks give the
    table only.
    """
    table: str
    column: str | None = None
    value: object = None
    lo: float | None = None
    hi: float | None = None


@dataclass(frozen=True, eq=False)
class DeletionTask:
    dtype: str                      # "A" | "R"
    conditions: tuple[Condition, ...]
    ratio: float

    def __post_init__(self):
        if self.dtype not in ("A", "R"):
            raise ValidationError(f"unknown deletion type {self.dtype!r}")
        if not 0.0 < self.ratio <= 1.0:
            raise ValidationError(f"ratio {self.ratio} outside (0, 1]")
        if not self.conditions:
            raise ValidationError("deletion task needs at least one condition")
        for c in self.conditions:
            if self.dtype == "A":
                if c.column is None:
                    raise ValidationError(f"A-task condition on {c.table!r} needs a column")
                if c.value is None and (c.lo is None or c.hi is None):
                    raise ValidationError(
                        f"A-task condition on {c.table}.{c.column} needs a value or range")

    @property
    def scope(self) -> int:
        return len(self.conditions)

    @property
    def name(self) -> str:
        return f"{self.dtype}-{self.scope}-{self.ratio:g}"

    def condition_columns(self) -> list[tuple[str, str]]:
        return [(c.table, c.column) for c in self.conditions if c.column is not None]


@dataclass(eq=False)
class DatasetSplit:
    retained: list[TableData]
    deleted: list[TableData]
    task: DeletionTask
    joins: list["Join"]
    hub: str
    retained_idx: list[np.ndarray] | None = None   # original row positions
    deleted_idx: list[np.ndarray] | None = None

    def retained_table(self, name: str) -> TableData:
        for t in self.retained:
            if t.name == name:
                return t
        raise ConfigurationError(f"unknown table {name!r}")

    def deleted_table(self, name: str) -> TableData:
        for t in self.deleted:
            if t.name == name:
                return t
        raise ConfigurationError(f"unknown table {name!r}")

    def original_table(self, name: str) -> TableData:
        """Original rows as retained + deleted (order is not the input order)."""
        r, d = self.retained_table(name), self.deleted_table(name)
        return TableData(name, r.columns,
                         [np.concatenate([a, b]) for a, b in zip(r.data, d.data)])

    def tables_with_deletions(self) -> list[str]:
        return [t.name for t in self.deleted if t.row_count > 0]

    def retained_join(self, cap: int = JOIN_CAP_DEFAULT) -> "JoinRelation":
        return materialize_join(self.retained, self.joins, cap=cap)

    def original_join(self, cap: int = JOIN_CAP_DEFAULT) -> "JoinRelation":
        originals = [self.original_table(t.name) for t in self.retained]
        return materialize_join(originals, self.joins, cap=cap)


def condition_mask(table: TableData, cond: Condition) -> np.ndarray:
    """Boolean mask of rows matching an attribute condition (original values)."""
    if cond.column is None:
        return np.ones(table.row_count, dtype=bool)
    spec = table.spec(cond.column)
    col = table.column(cond.column)
    if spec.kind == CATEGORICAL:
        originals = spec.dictionary[col]
    else:
        originals = col
    if cond.value is not None:
        return originals == cond.value
    return (originals >= cond.lo) & (originals <= cond.hi)


def apply_deletion(db: SchemaGraph, task: DeletionTask, seed: int) -> DatasetSplit:
    """Partition every table into retained/deleted rows for a deletion task.

    The deleted count per affected table is round(ratio * |matching rows|),
    at least 1 when the ratio is positive and anything matches.  Row choice
    within the matching set is drawn from a generator seeded with ``seed``,
    so reruns are identical.
    """
    by_table = {}
    for cond in task.conditions:
        if cond.table not in db.table_names():
            raise ConfigurationError(f"unknown table {cond.table!r} in deletion task")
        if cond.column is not None:
            db.table(cond.table)._index(cond.column)  # raises on unknown column
        by_table.setdefault(cond.table, []).append(cond)

    rng = np.random.default_rng(seed)
    retained, deleted, ridx, didx = [], [], [], []
    for table in db.tables:
        conds = by_table.get(table.name, [])
        mask = np.zeros(table.row_count, dtype=bool)
        for cond in conds:
            mask |= condition_mask(table, cond)
        match = np.nonzero(mask)[0]
        n_del = 0
        if conds and match.size:
            n_del = int(round(task.ratio * match.size))
            n_del = max(1, min(n_del, match.size))
        if n_del == match.size:
            chosen = match
        else:
            chosen = np.sort(rng.choice(match, size=n_del, replace=False))
        keep = np.ones(table.row_count, dtype=bool)
        keep[chosen] = False
        kept = np.nonzero(keep)[0]
        retained.append(table.take(kept))
        deleted.append(table.take(chosen))
        ridx.append(kept)
        didx.append(chosen)
    return DatasetSplit(retained, deleted, task, joins=list(db.joins), hub=db.hub,
                        retained_idx=ridx, deleted_idx=didx)


# ---------------------------------------------------------------------------
# joins


@dataclass(eq=False)
class JoinRelation:
    """Join result over a connected subtree of tables containing the root.

    Either materialized (``data`` holds one array per output column) or a
    lazy handle carrying the participating tables and join edges for
    random-walk sampling.  Output columns are the root table's columns
    followed by the other tables' in their given order, with each join's
    parent-side key dropped (it duplicates the child's foreign key).
    """
    columns: list[ColumnSpec]       # qualified "table.column" names
    data: list[np.ndarray] | None
    cardinality: int | None
    tables: list[TableData]
    joins: list[Join]

    @property
    def materialized(self) -> bool:
        return self.data is not None

    def column(self, qualified: str) -> np.ndarray:
        if not self.materialized:
            raise ValidationError("relation is not materialized")
        for spec, col in zip(self.columns, self.data):
            if spec.name == qualified:
                return col
        raise ConfigurationError(f"unknown join column {qualified!r}")


def _root_table(tables: list[TableData], joins: list[Join]) -> str:
    parents = {j.parent for j in joins}
    roots = [t.name for t in tables if t.name not in parents]
    if len(roots) != 1:
        raise ValidationError(f"join scope must have exactly one root, got {roots}")
    return roots[0]


def _scope_joins(tables: list[TableData], joins: list[Join]) -> list[Join]:
    names = {t.name for t in tables}
    scoped = [j for j in joins if j.child in names and j.parent in names]
    if len(scoped) != len(names) - 1:
        raise ValidationError("tables do not form a connected join subtree")
    return scoped


def _pk_lookup(parent: TableData, pk: str) -> np.ndarray:
    """Dense pk-code -> row index map (-1 where the code has no row)."""
    codes = parent.column(pk)
    size = parent.spec(pk).domain_size
    lut = np.full(size, -1, dtype=np.int64)
    lut[codes] = np.arange(len(codes), dtype=np.int64)
    return lut


def _output_columns(tables, joins):
    """(qualified spec, table, column) triples with parent-side keys dropped."""
    dropped = {(j.parent, j.pk) for j in joins}
    out = []
    for t in tables:
        for spec in t.columns:
            if (t.name, spec.name) in dropped:
                continue
            out.append((replace(spec, name=f"{t.name}.{spec.name}"), t.name, spec.name))
    return out


def materialize_join(tables: list[TableData], joins: list[Join],
                     cap: int = JOIN_CAP_DEFAULT) -> JoinRelation:
    """Exact inner join of a connected subtree (root table listed first).

    Missing parent rows eliminate child rows, so the same routine joins
    retained or deleted table versions.  Raises SizeError when the root's
    row count exceeds ``cap`` (use sampling on the lazy relation instead).
    """
    joins = _scope_joins(tables, joins)
    root = _root_table(tables, joins)
    lookup = {t.name: t for t in tables}
    if lookup[root].row_count > cap:
        raise SizeError(f"estimated join size {lookup[root].row_count} exceeds cap {cap}; "
                        "use sampling on the lazy relation")

    row_idx = {root: np.arange(lookup[root].row_count, dtype=np.int64)}
    pending = list(joins)
    while pending:
        progressed = False
        for j in list(pending):
            if j.child in row_idx and j.parent not in row_idx:
                child = lookup[j.child]
                fk = child.column(j.fk)[row_idx[j.child]]
                lut = _pk_lookup(lookup[j.parent], j.pk)
                pidx = lut[fk]
                hit = pidx >= 0
                if not hit.all():
                    for name in row_idx:
                        row_idx[name] = row_idx[name][hit]
                    pidx = pidx[hit]
                row_idx[j.parent] = pidx
                pending.remove(j)
                progressed = True
        if not progressed:
            raise ValidationError("join edges do not reach all scope tables from the root")

    n = len(row_idx[root])
    ordered = [lookup[root]] + [t for t in tables if t.name != root]
    cols, data = [], []
    for spec, tname, cname in _output_columns(ordered, joins):
        cols.append(spec)
        data.append(lookup[tname].column(cname)[row_idx[tname]])
    return JoinRelation(columns=cols, data=data, cardinality=n,
                        tables=ordered, joins=joins)


def lazy_join(tables: list[TableData], joins: list[Join]) -> JoinRelation:
    """Non-materialized handle for random-walk sampling."""
    joins = _scope_joins(tables, joins)
    root = _root_table(tables, joins)
    lookup = {t.name: t for t in tables}
    ordered = [lookup[root]] + [t for t in tables if t.name != root]
    cols = [spec for spec, _, _ in _output_columns(ordered, joins)]
    return JoinRelation(columns=cols, data=None, cardinality=None,
                        tables=ordered, joins=joins)


def semi_join_deletion(split: DatasetSplit, table_index: int,
                       cap: int = JOIN_CAP_DEFAULT) -> JoinRelation:
    """Join with one table replaced by its deleted subset, the others full.

    ``table_index`` indexes the split's table list (0-based).  An empty
    deleted subset yields a valid empty relation (cardinality 0)."""
    if not 0 <= table_index < len(split.retained):
        raise ValidationError(f"table index {table_index} out of range")
    tables = []
    for i in range(len(split.retained)):
        name = split.retained[i].name
        if i == table_index:
            tables.append(split.deleted[i])
        else:
            tables.append(split.original_table(name))
    return materialize_join(tables, split.joins, cap=cap)


def sample_join(rel: JoinRelation, batch: int, rng: np.random.Generator,
                max_attempts: int = 1000) -> np.ndarray:
    """Draw a batch of join tuples as a (batch, ncols) float64 matrix.

    Materialized relations are sampled uniformly without replacement per
    call (a batch larger than the relation returns one full permutation).
    Lazy relations use unweighted random walks: a uniform root row, then
    the unique parent row along every edge; walks hitting a missing parent
    are rejected and redrawn.
    """
    if rel.materialized:
        if rel.cardinality == 0:
            raise EmptyRelationError("cannot sample from an empty relation")
        take = min(batch, rel.cardinality)
        idx = rng.choice(rel.cardinality, size=take, replace=False)
        return np.stack([col[idx].astype(np.float64) for col in rel.data], axis=1)

    lookup = {t.name: t for t in rel.tables}
    root = rel.tables[0]
    if root.row_count == 0:
        raise EmptyRelationError("cannot sample from an empty relation")
    luts = {(j.parent, j.pk): _pk_lookup(lookup[j.parent], j.pk) for j in rel.joins}

    out_rows = []
    total = 0
    attempts = 0
    while total < batch:
        attempts += 1
        if attempts > max_attempts:
            raise EmptyRelationError("random walk kept hitting missing join partners")
        need = batch - total
        ridx = rng.integers(0, root.row_count, size=need)
        row_idx = {root.name: ridx}
        alive = np.ones(need, dtype=bool)
        pending = list(rel.joins)
        while pending:
            for j in list(pending):
                if j.child in row_idx and j.parent not in row_idx:
                    fk = lookup[j.child].column(j.fk)[row_idx[j.child]]
                    pidx = luts[(j.parent, j.pk)][fk]
                    alive &= pidx >= 0
                    row_idx[j.parent] = np.where(pidx >= 0, pidx, 0)
                    pending.remove(j)
        if alive.any():
            keep = np.nonzero(alive)[0]
            cols = []
            for spec, tname, cname in _output_columns(rel.tables, rel.joins):
                cols.append(lookup[tname].column(cname)[row_idx[tname][keep]].astype(np.float64))
            chunk = np.stack(cols, axis=1)
            out_rows.append(chunk)
            total += chunk.shape[0]
    return np.concatenate(out_rows, axis=0)[:batch]


def attribute_specs(rel: JoinRelation) -> list[ColumnSpec]:
    """Join-relation columns that are model attributes: everything except
    the join keys, which exist only to connect tables."""
    keys = set()
    for j in rel.joins:
        keys.add(f"{j.child}.{j.fk}")
        keys.add(f"{j.parent}.{j.pk}")
    return [s for s in rel.columns if s.name not in keys]


def empirical_pmf(values: np.ndarray, spec: ColumnSpec, bins: int = 64) -> np.ndarray:
    """Empirical pmf of a column: per-code frequencies for categorical
    columns, equal-width-bin frequencies over [lo, hi] for numerical ones."""
    values = np.asarray(values)
    if values.size == 0:
        raise EmptyRelationError(f"empirical pmf of {spec.name!r} needs rows")
    if spec.kind == CATEGORICAL:
        counts = np.bincount(values.astype(np.int64), minlength=spec.domain_size)
    else:
        idx = numeric_bin_index(values.astype(np.float64), spec.lo, spec.hi, bins)
        counts = np.bincount(idx, minlength=bins)
    return counts / counts.sum()


def numeric_bin_index(values: np.ndarray, lo: float, hi: float, bins: int) -> np.ndarray:
    """Equal-width bin index over [lo, hi]; the top edge folds into the last bin."""
    if hi <= lo:
        return np.zeros(len(values), dtype=np.int64)
    idx = np.floor((values - lo) / (hi - lo) * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


# ---------------------------------------------------------------------------
# persistence: CSV tables + dictionaries + line-oriented schema file


def save_dataset(db: SchemaGraph, directory: str | Path):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for t in db.tables:
        lines.append(f"table {t.name}")
        for spec in t.columns:
            if spec.kind == CATEGORICAL:
                lines.append(f"column {spec.name} categorical")
            else:
                lines.append(f"column {spec.name} numerical {spec.lo!r} {spec.hi!r}")
        with open(directory / f"{t.name}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([spec.name for spec in t.columns])
            matrix = []
            for spec, col in zip(t.columns, t.data):
                if spec.kind == CATEGORICAL:
                    matrix.append([str(int(v)) for v in col])
                else:
                    matrix.append([repr(float(v)) for v in col])
            for row in zip(*matrix) if matrix else []:
                w.writerow(row)
        for spec in t.columns:
            if spec.kind == CATEGORICAL:
                with open(directory / f"{t.name}__{spec.name}.dict", "w") as fh:
                    for code, val in enumerate(spec.dictionary):
                        fh.write(f"{code},{int(val)}\n")
    for j in db.joins:
        lines.append(f"join {j.child}.{j.fk} {j.parent}.{j.pk}")
    lines.append(f"hub {db.hub}")
    (directory / "schema.txt").write_text("\n".join(lines) + "\n")


def load_dataset(directory: str | Path, validate: bool = True) -> SchemaGraph:
    directory = Path(directory)
    schema_path = directory / "schema.txt"
    if not schema_path.exists():
        raise ConfigurationError(f"no schema file at {schema_path}")
    tables: list[TableData] = []
    joins: list[Join] = []
    hub = None
    current: list[tuple[str, list]] = []  # (table, [column defs])

    def flush():
        if not current:
            return
        tname, coldefs = current.pop()
        raw = _read_csv(directory / f"{tname}.csv", [c[0] for c in coldefs])
        columns, data = [], []
        for cname, kind, lo, hi in coldefs:
            col_raw = raw[cname]
            if kind == CATEGORICAL:
                dictionary = _read_dict(directory / f"{tname}__{cname}.dict")
                codes = col_raw.astype(np.int64)
                columns.append(ColumnSpec(cname, CATEGORICAL, dictionary=dictionary))
                data.append(codes)
            else:
                vals = col_raw.astype(np.float64)
                distinct = np.unique(vals) if vals.size else np.array([], dtype=np.float64)
                columns.append(ColumnSpec(cname, NUMERICAL, lo=lo, hi=hi,
                                          distinct_values=distinct))
                data.append(vals)
        tables.append(TableData(tname, columns, data))

    for lineno, line in enumerate(schema_path.read_text().splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "table":
            flush()
            current.append((parts[1], []))
        elif parts[0] == "column":
            if not current:
                raise ConfigurationError(f"schema.txt:{lineno}: column before table")
            if parts[2] == CATEGORICAL:
                current[-1][1].append((parts[1], CATEGORICAL, 0.0, 0.0))
            elif parts[2] == NUMERICAL:
                current[-1][1].append((parts[1], NUMERICAL, float(parts[3]), float(parts[4])))
            else:
                raise ConfigurationError(f"schema.txt:{lineno}: bad kind {parts[2]!r}")
        elif parts[0] == "join":
            flush()
            child_fk, parent_pk = parts[1], parts[2]
            c_t, c_c = child_fk.split(".")
            p_t, p_c = parent_pk.split(".")
            joins.append(Join(c_t, c_c, p_t, p_c))
        elif parts[0] == "hub":
            flush()
            hub = parts[1]
        else:
            raise ConfigurationError(f"schema.txt:{lineno}: unknown directive {parts[0]!r}")
    flush()
    if hub is None:
        raise ConfigurationError("schema.txt declares no hub")
    db = SchemaGraph(tables, joins, hub)
    if validate:
        db.validate()  # partial datasets (split halves) skip this
    return db


def _read_csv(path: Path, expected_header: list[str]) -> dict[str, np.ndarray]:
    if not path.exists():
        raise ConfigurationError(f"missing table file {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != expected_header:
            raise ConfigurationError(f"{path}: header {header} != schema {expected_header}")
        rows = list(reader)
    out = {}
    for i, name in enumerate(header):
        out[name] = np.array([r[i] for r in rows], dtype=np.float64) if rows else \
            np.array([], dtype=np.float64)
    return out


def _read_dict(path: Path) -> np.ndarray:
    if not path.exists():
        raise ConfigurationError(f"missing dictionary file {path}")
    pairs = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        code, val = line.split(",", 1)
        pairs.append((int(code), int(val)))
    pairs.sort()
    if [c for c, _ in pairs] != list(range(len(pairs))):
        raise ConfigurationError(f"{path}: codes are not dense 0..n-1")
    return np.array([v for _, v in pairs], dtype=np.int64)
