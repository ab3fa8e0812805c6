"""Shared fixtures and independent oracles.

The oracles here deliberately avoid the library's own code paths: joins are
counted with pure-Python nested loops, gradients with central finite
differences, and model probabilities by exhaustive enumeration, so tests
compare two genuinely different computations.
"""
from __future__ import annotations

import itertools

import numpy as np
import pytest

from cardest.model import (ArDensityModel, ModelConfig, batch_nll_terms,
                           forward, init_model, loss_and_grad)
from cardest.relational import (CATEGORICAL, NUMERICAL, ColumnSpec, Join,
                                SchemaGraph, TableData)


# ---------------------------------------------------------------------------
# tiny hand-built schemas


def make_table(name, cols):
    """cols: list of (name, kind, payload) where payload is a value array for
    numerical or (codes, dictionary) for categorical."""
    specs, data = [], []
    for cname, kind, payload in cols:
        if kind == CATEGORICAL:
            codes, dictionary = payload
            specs.append(ColumnSpec(cname, CATEGORICAL,
                                    dictionary=np.asarray(dictionary, dtype=np.int64)))
            data.append(np.asarray(codes, dtype=np.int64))
        else:
            vals, lo, hi = payload
            vals = np.asarray(vals, dtype=np.float64)
            specs.append(ColumnSpec(cname, NUMERICAL, lo=lo, hi=hi,
                                    distinct_values=np.unique(vals)))
            data.append(vals)
    return TableData(name, specs, data)


@pytest.fixture
def star_db():
    """3-table star: fact(10) -> dim1(4), dim2(3), with attribute columns."""
    rng = np.random.default_rng(42)
    n = 10
    fact = make_table("fact", [
        ("d1", CATEGORICAL, (rng.integers(0, 4, n), np.arange(4))),
        ("d2", CATEGORICAL, (rng.integers(0, 3, n), np.arange(3))),
        ("color", CATEGORICAL, (rng.integers(0, 3, n), [7, 8, 9])),
        ("amount", NUMERICAL, (rng.integers(0, 100, n).astype(float), 0.0, 100.0)),
    ])
    dim1 = make_table("dim1", [
        ("id", CATEGORICAL, (np.arange(4), np.arange(4))),
        ("grp", CATEGORICAL, (rng.integers(0, 2, 4), [50, 60])),
    ])
    dim2 = make_table("dim2", [
        ("id", CATEGORICAL, (np.arange(3), np.arange(3))),
        ("val", NUMERICAL, (rng.integers(0, 100, 3).astype(float), 0.0, 100.0)),
    ])
    db = SchemaGraph([fact, dim1, dim2],
                     [Join("fact", "d1", "dim1", "id"), Join("fact", "d2", "dim2", "id")],
                     hub="fact")
    db.validate()
    return db


# ---------------------------------------------------------------------------
# nested-loop join oracle


def nested_loop_join(tables, joins):
    """All join tuples as dicts {table: row_index}, by brute force over the
    full cross product of row indices."""
    names = [t.name for t in tables]
    lookup = {t.name: t for t in tables}
    results = []
    for combo in itertools.product(*[range(t.row_count) for t in tables]):
        rows = dict(zip(names, combo))
        ok = True
        for j in joins:
            if j.child not in rows or j.parent not in rows:
                continue
            fk = lookup[j.child].column(j.fk)[rows[j.child]]
            pk = lookup[j.parent].column(j.pk)[rows[j.parent]]
            if fk != pk:
                ok = False
                break
        if ok:
            results.append(rows)
    return results


# ---------------------------------------------------------------------------
# model oracles


def tiny_model(seed=0, doms=(3, 4), bins=4, embedding_dim=2, hidden_dim=8,
               blocks=1, order=None, dropout=0.0):
    """Small model over len(doms) categorical columns plus one numeric."""
    specs = []
    for i, d in enumerate(doms):
        specs.append(ColumnSpec(f"t.c{i}", CATEGORICAL,
                                dictionary=np.arange(d, dtype=np.int64)))
    specs.append(ColumnSpec("t.num", NUMERICAL, lo=0.0, hi=1.0,
                            distinct_values=np.linspace(0, 1, 5)))
    cfg = ModelConfig(embedding_dim=embedding_dim, hidden_dim=hidden_dim,
                      residual_blocks=blocks, dropout=dropout, numeric_bins=bins,
                      column_order=order)
    return init_model(specs, cfg, seed=seed)


def fd_gradient(model: ArDensityModel, X: np.ndarray, weights=None, h=1e-5):
    """Central-difference gradient of the weighted mean NLL over a batch,
    perturbing every parameter (dense weights, biases, embeddings)."""

    def loss_at():
        loss, _ = loss_and_grad(model, X, weights)
        return loss

    grads = {}
    for key, arr in list(model.params.items()):
        g = np.zeros_like(arr)
        flat = arr.ravel()
        gf = g.ravel()
        for idx in range(flat.size):
            old = flat[idx]
            flat[idx] = old + h
            up = loss_at()
            flat[idx] = old - h
            down = loss_at()
            flat[idx] = old
            gf[idx] = (up - down) / (2 * h)
        grads[key] = g
    for i, arr in enumerate(model.embeddings):
        g = np.zeros_like(arr)
        flat = arr.ravel()
        gf = g.ravel()
        for idx in range(flat.size):
            old = flat[idx]
            flat[idx] = old + h
            up = loss_at()
            flat[idx] = old - h
            down = loss_at()
            flat[idx] = old
            gf[idx] = (up - down) / (2 * h)
        grads[f"emb:{i}"] = g
    return grads


def max_relative_error(analytic: dict, numeric: dict, floor=1e-6) -> float:
    worst = 0.0
    for k, ga in analytic.items():
        gn = numeric[k]
        denom = np.maximum(np.maximum(np.abs(ga), np.abs(gn)), floor)
        worst = max(worst, float((np.abs(ga - gn) / denom).max()))
    return worst


def enumerate_probabilities(model: ArDensityModel):
    """(tuples, probabilities) by exhaustive enumeration over the domain
    product; the probabilities should sum to 1 for a valid density."""
    sizes = [c.domain_size for c in model.columns]
    combos = np.array(list(itertools.product(*[range(s) for s in sizes])),
                      dtype=np.int64)
    logits, _ = forward(model, combos)
    terms = batch_nll_terms(model, combos, logits)
    return combos, np.exp(-terms.sum(axis=1))
