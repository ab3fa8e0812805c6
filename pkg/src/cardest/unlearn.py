"""Deletion unlearning for the density model.

Two pruning stages followed by fine-tuning on the retained join:

* domain pruning drops model support for values that no longer occur in the
  retained tables — categorical codes lose their embedding rows and output
  logits outright, numeric columns get a compaction remap so deleted
  subranges vanish from the binned input space;
* distribution-sensitivity pruning scores dense weights by the squared
  gradient of a column-shift-weighted loss over per-table "deleted join"
  relations (the join with one table swapped for its deleted rows) and
  zeroes the highest-scoring weights, spreading the total budget evenly
  over the affected tables.

During the fine-tune that follows, the zeroed weights may regrow by
default (pruning acts as a targeted reset, which measurably beats
permanent sparsity at this model scale); ``CepConfig.freeze_pruned`` keeps
them hard-zero instead.  Baselines (stale / retrain / fine-tune) run
through the same entry point so their timings and traces are comparable.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .domains import NumericRemap, build_numeric_remap, clamp_interval
from .errors import ConfigurationError, ValidationError
from .model import (ArDensityModel, ModelConfig, encode_relation, grad_nll,
                    init_model, nll_terms, train)
from .queries import Predicate, Query
from .relational import (CATEGORICAL, JOIN_CAP_DEFAULT, DatasetSplit,
                         JoinRelation, attribute_specs, empirical_pmf,
                         semi_join_deletion)

LOSS_MODES = ("per_conditional", "joint_aggregated")
METHODS = ("stale", "retrain", "finetune", "cep")


@dataclass(frozen=True)
class CepConfig:
    alpha: float = 0.5
    sampling_iterations: int = 50
    batch_size: int = 128
    loss_mode: str = "per_conditional"
    domain_prune: bool = True
    sensitivity_prune: bool = True
    finetune_epochs: int = 12
    gap_threshold: float | None = None   # fraction of the column range; None -> 1/bins
    # keep pruned weights hard-zero through fine-tuning; by default they are
    # zeroed at prune time but may regrow (at this model scale permanent
    # sparsity measurably degrades tail accuracy while a targeted reset helps)
    freeze_pruned: bool = False

    def validate(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValidationError("alpha must lie in [0, 1)")
        if self.sampling_iterations < 1:
            raise ValidationError("sampling_iterations must be >= 1")
        if self.loss_mode not in LOSS_MODES:
            raise ValidationError(f"unknown loss mode {self.loss_mode!r}")


# ---------------------------------------------------------------------------
# attribute sensitivity


def attribute_sensitivity(p_full: np.ndarray, p_retained: np.ndarray) -> float:
    """Relative distributional shift of one column: sum over values still in
    the retained domain of |P(v) - P_r(v)| / P_r(v).

    Values with zero retained mass are ignored here; removing them is domain
    pruning's job.  Retained mass where the full pmf has none indicates the
    inputs are not a full/retained pair of the same column.
    """
    p_full = np.asarray(p_full, dtype=np.float64)
    p_retained = np.asarray(p_retained, dtype=np.float64)
    if p_full.shape != p_retained.shape:
        raise ValidationError("pmfs have mismatched domains")
    support = p_retained > 0.0
    if (support & (p_full == 0.0)).any():
        raise ValidationError("retained pmf has support the full pmf lacks")
    return float((np.abs(p_full - p_retained)[support] / p_retained[support]).sum())


def column_shift_weights(model: ArDensityModel, full_rel: JoinRelation,
                         retained_rel: JoinRelation) -> np.ndarray:
    """Per-model-column shift weights from full-join vs retained-join pmfs.

    Both pmfs are taken in the original value space (same bin grid), so the
    weights do not depend on any remap already attached to the model.
    """
    spec_by_name = {s.name: s for s in full_rel.columns}
    bins = model.cfg.numeric_bins
    out = np.zeros(model.ncols)
    for i, col in enumerate(model.columns):
        spec = spec_by_name[col.name]
        pf = empirical_pmf(full_rel.column(col.name), spec, bins=bins)
        pr = empirical_pmf(retained_rel.column(col.name), spec, bins=bins)
        out[i] = attribute_sensitivity(pf, pr)
    return out


def effective_column_weights(shift: np.ndarray, loss_mode: str, ncols: int) -> np.ndarray:
    """Per-conditional mode weighs each conditional term by its own column
    shift; joint mode multiplies the whole joint NLL by the summed shifts,
    which is the same as giving every term that sum."""
    shift = np.asarray(shift, dtype=np.float64)
    if loss_mode == "per_conditional":
        return shift
    if loss_mode == "joint_aggregated":
        return np.full(ncols, shift.sum())
    raise ValidationError(f"unknown loss mode {loss_mode!r}")


def weighted_loss_per_conditional(model: ArDensityModel, row: np.ndarray,
                                  shift: np.ndarray) -> float:
    terms = nll_terms(model, row)
    shift = np.asarray(shift, dtype=np.float64)
    if shift.shape != terms.shape:
        raise ValidationError("shift weights length must equal the column count")
    return float((shift * terms).sum())


def weighted_loss_joint(model: ArDensityModel, row: np.ndarray, shift: np.ndarray,
                        present_columns: list[int] | None = None) -> float:
    terms = nll_terms(model, row)
    shift = np.asarray(shift, dtype=np.float64)
    if shift.shape != terms.shape:
        raise ValidationError("shift weights length must equal the column count")
    idx = np.arange(model.ncols) if present_columns is None else np.asarray(present_columns)
    return float(terms.sum() * shift[idx].sum())


# ---------------------------------------------------------------------------
# sensitivity scores


@dataclass(eq=False)
class SensitivityScores:
    values: dict[str, np.ndarray]
    iterations: int = 0
    tuples_used: int = 0
    tuples_skipped: int = 0

    @property
    def empty(self) -> bool:
        return self.iterations == 0

    def add(self, other: "SensitivityScores"):
        for k, v in other.values.items():
            self.values[k] += v
        self.iterations += other.iterations


def zero_scores(model: ArDensityModel) -> SensitivityScores:
    values = {k: np.zeros_like(v) for k, v in model.params.items()}
    for i in range(model.ncols):
        values[f"emb:{i}"] = np.zeros_like(model.embeddings[i])
    return SensitivityScores(values=values)


def accumulate_scores(model: ArDensityModel, rel: JoinRelation,
                      shift: np.ndarray, n_iterations: int, batch_size: int,
                      rng: np.random.Generator,
                      loss_mode: str = "per_conditional") -> SensitivityScores:
    """Squared batch-mean gradients of the shift-weighted loss, summed over
    sampling iterations of one deleted-join relation.

    Tuples whose categorical cells are no longer representable (their codes
    were domain-pruned) are skipped; numeric cells in deleted gaps are
    clamped to the nearest retained boundary.  An empty or fully skipped
    relation yields zero scores with ``empty`` set, contributing no pruning.
    """
    scores = zero_scores(model)
    if rel.cardinality == 0:
        scores.tuples_skipped = 0
        return scores
    codes, valid = encode_relation(model, rel, gap_policy="clamp")
    scores.tuples_skipped = int((~valid).sum())
    codes = codes[valid]
    if codes.shape[0] == 0:
        return scores
    weights = effective_column_weights(shift, loss_mode, model.ncols)
    n = codes.shape[0]
    take = min(batch_size, n)
    for _ in range(n_iterations):
        idx = rng.choice(n, size=take, replace=False)
        grads = grad_nll(model, codes[idx], weights)
        for k, g in grads.items():
            scores.values[k] += g * g
    scores.iterations = n_iterations
    scores.tuples_used = n
    return scores


# ---------------------------------------------------------------------------
# pruning


def prune_step(model: ArDensityModel, scores: SensitivityScores, alpha_k: float,
               pool_size: int | None = None) -> dict:
    """Zero the floor(alpha_k * pool_size) not-yet-pruned dense weights with
    the highest scores (ties broken by lower flat index over the canonical
    weight-key order).  Mutates the model's weights and prune masks."""
    if not 0.0 <= alpha_k < 1.0:
        raise ValidationError("alpha_k must lie in [0, 1)")
    if pool_size is None:
        pool_size = model.eligible_weight_count()
    target = int(np.floor(alpha_k * pool_size))
    if target == 0:
        return {"pruned": 0, "saturated": False}

    keys = model.weight_keys()
    flat_scores, flat_pos, offsets = [], [], {}
    base = 0
    for k in keys:
        conn = model.conn_masks[k]
        keep = model.prune_masks[k]
        eligible = (conn > 0) & (keep > 0)
        idx = np.nonzero(eligible.ravel())[0]
        flat_scores.append(scores.values[k].ravel()[idx])
        flat_pos.append(idx + base)
        offsets[k] = base
        base += conn.size
    flat_scores = np.concatenate(flat_scores)
    flat_pos = np.concatenate(flat_pos)

    saturated = target > flat_scores.size
    take = min(target, flat_scores.size)
    # stable sort on negated scores: ties resolve to the lower flat index
    chosen = flat_pos[np.argsort(-flat_scores, kind="stable")[:take]]

    for k in keys:
        size = model.conn_masks[k].size
        local = chosen[(chosen >= offsets[k]) & (chosen < offsets[k] + size)] - offsets[k]
        if local.size:
            mask = model.prune_masks[k].ravel()
            mask[local] = 0.0
            model.prune_masks[k] = mask.reshape(model.conn_masks[k].shape)
            w = model.params[k].ravel()
            w[local] = 0.0
            model.params[k] = w.reshape(model.conn_masks[k].shape)
    return {"pruned": int(take), "saturated": bool(saturated)}


def distribution_sensitivity_pruning(model: ArDensityModel, split: DatasetSplit,
                                     cfg: CepConfig, rng: np.random.Generator,
                                     cap: int = JOIN_CAP_DEFAULT) -> dict:
    """Iterative pruning over the per-table deleted joins (in place).

    Computes column shifts from the full vs retained joins once, then for
    each table with deletions accumulates scores over the deleted join and
    prunes a per-table share alpha/K of the weight pool, so the total
    pruned fraction is alpha up to integer rounding.
    """
    cfg.validate()
    tables_k = split.tables_with_deletions()
    if not tables_k:
        return {"tables": [], "total_pruned": 0, "pool_size": model.eligible_weight_count(),
                "shift": np.zeros(model.ncols)}
    full_rel = split.original_join(cap)
    retained_rel = split.retained_join(cap)
    shift = column_shift_weights(model, full_rel, retained_rel)

    pool_size = model.eligible_weight_count()
    k_count = len(tables_k)
    alpha_k = cfg.alpha / k_count
    name_to_index = {t.name: i for i, t in enumerate(split.retained)}

    info = {"tables": [], "pool_size": pool_size, "total_pruned": 0, "shift": shift}
    for tname in tables_k:
        rel_k = semi_join_deletion(split, name_to_index[tname], cap=cap)
        scores = accumulate_scores(model, rel_k, shift, cfg.sampling_iterations,
                                   cfg.batch_size, rng, cfg.loss_mode)
        entry = {"table": tname, "join_rows": rel_k.cardinality,
                 "tuples_used": scores.tuples_used,
                 "tuples_skipped": scores.tuples_skipped,
                 "pruned": 0, "saturated": False, "skipped": False}
        if scores.empty or scores.tuples_used == 0:
            # nothing representable to score: this table contributes no pruning
            entry["skipped"] = True
        else:
            res = prune_step(model, scores, alpha_k, pool_size)
            entry.update(pruned=res["pruned"], saturated=res["saturated"])
            info["total_pruned"] += res["pruned"]
        info["tables"].append(entry)
    return info


def release_prune_masks(model: ArDensityModel):
    """Lift the prune masks: weights stay at their current (zeroed) values
    but become trainable again."""
    for k in model.weight_keys():
        model.prune_masks[k] = np.ones_like(model.prune_masks[k])


# ---------------------------------------------------------------------------
# domain pruning


def domain_prune_categorical(model: ArDensityModel, column: str,
                             retained_codes: np.ndarray) -> dict[int, int]:
    """Drop embedding rows and output logits for codes no longer retained
    (in place); returns the old-model-code -> new-model-code map.

    The pruned values become unrepresentable: encoding rejects them and
    predicate translation gives them zero weight, so no model operation can
    assign them probability mass."""
    i = model.column_index(column)
    col = model.columns[i]
    if col.kind != CATEGORICAL:
        raise ValidationError(f"{column!r} is not categorical")
    retained_codes = np.sort(np.unique(np.asarray(retained_codes, dtype=np.int64)))
    if retained_codes.size == 0:
        raise ValidationError(f"cannot prune the whole domain of {column!r}")
    current = set(int(c) for c in col.codes)
    if not set(int(c) for c in retained_codes) <= current:
        raise ValidationError(f"retained codes for {column!r} exceed the current domain")
    if retained_codes.size == len(col.codes):
        return {j: j for j in range(len(col.codes))}

    keep_mask = np.isin(col.codes, retained_codes)
    keep_pos = np.nonzero(keep_mask)[0]
    code_map = {int(old): new for new, old in enumerate(keep_pos)}

    offs = model.logit_offsets()
    lo, hi = int(offs[i]), int(offs[i + 1])
    keep_logits = np.concatenate([np.arange(lo), lo + keep_pos, np.arange(hi, offs[-1])])
    model.params["w_out"] = model.params["w_out"][:, keep_logits]
    model.params["b_out"] = model.params["b_out"][keep_logits]
    model.conn_masks["w_out"] = model.conn_masks["w_out"][:, keep_logits]
    model.prune_masks["w_out"] = model.prune_masks["w_out"][:, keep_logits]
    model.embeddings[i] = model.embeddings[i][keep_pos]
    col.codes = col.codes[keep_pos]
    col.values = col.values[keep_pos]
    return code_map


def apply_domain_pruning(model: ArDensityModel, split: DatasetSplit,
                         gap_threshold: float | None = None) -> dict:
    """Shrink the model's domains to what the retained tables still contain
    (in place).

    Categorical columns lose vanished codes structurally.  Numeric columns
    whose retained values leave a gap of at least ``gap_threshold`` (default
    one bin width) of the range get a compaction remap attached; training
    data and queries pass through it before binning."""
    thr = gap_threshold if gap_threshold is not None else 1.0 / model.cfg.numeric_bins
    report = {"categorical": {}, "remaps": {}}
    for col in list(model.columns):
        tname, cname = col.name.split(".", 1)
        table = split.retained_table(tname)
        values = table.column(cname)
        if values.size == 0:
            raise ValidationError(f"table {tname!r} retained no rows; nothing to model")
        if col.kind == CATEGORICAL:
            retained_codes = np.unique(values.astype(np.int64))
            if retained_codes.size < len(col.codes):
                report["categorical"][col.name] = domain_prune_categorical(
                    model, col.name, retained_codes)
        else:
            original_distinct = np.unique(
                split.original_table(tname).column(cname).astype(np.float64))
            retained_distinct = np.unique(values.astype(np.float64))
            if retained_distinct.size < original_distinct.size:
                if col.remap is not None:
                    raise ValidationError(f"{col.name!r} already carries a remap")
                remap = build_numeric_remap(col.lo, col.hi, retained_distinct, thr)
                if not remap.is_identity:
                    col.remap = remap
                    report["remaps"][col.name] = remap
    return report


def clamp_query(query: Query, remaps: dict[str, NumericRemap],
                deleted_categorical: dict[str, set]) -> Query:
    """Rewrite a query against the pruned value space.

    Numeric predicates on remapped columns get their endpoints moved inward
    to the nearest retained boundary and remapped (a range wholly inside a
    deleted gap becomes an ``empty`` predicate).  Equality predicates on
    deleted categorical values become ``empty``.  Everything else passes
    through unchanged.
    """
    out = []
    for p in query.predicates:
        if p.op == "eq" and p.column in deleted_categorical and \
                p.value in deleted_categorical[p.column]:
            out.append(Predicate(p.column, "empty"))
            continue
        remap = remaps.get(p.column)
        if remap is None or p.op not in ("range", "outside"):
            out.append(p)
            continue
        pieces = []
        for lo, hi, _, _ in p.intervals():
            lo = max(lo, remap.lo)
            hi = min(hi, remap.hi)
            mapped = clamp_interval(remap, lo, hi)
            if mapped is not None:
                pieces.append(mapped)
        if not pieces:
            out.append(Predicate(p.column, "empty"))
        elif len(pieces) == 1:
            out.append(Predicate(p.column, "range", lo=pieces[0][0], hi=pieces[0][1]))
        else:
            # two disjoint remapped pieces from an "outside" predicate
            out.append(Predicate(p.column, "outside", lo=pieces[0][1], hi=pieces[1][0],
                                 lo_strict=False, hi_strict=False))
    return query.with_predicates(out)


# ---------------------------------------------------------------------------
# fine-tuning and the method dispatcher


def fine_tune(model: ArDensityModel, data: np.ndarray, seed,
              epochs: int, step_hook=None) -> list[float]:
    """Continue training on retained-join rows (in place): fresh optimizer
    moments, pruned weight positions stay exactly zero."""
    return train(model, data, seed, epochs=epochs, step_hook=step_hook)


@dataclass(eq=False)
class MethodRun:
    method: str
    model: ArDensityModel
    timings: dict[str, float] = field(default_factory=dict)
    loss_trace: list[float] = field(default_factory=list)
    info: dict = field(default_factory=dict)


def run_method(method: str, split: DatasetSplit, original: ArDensityModel | None,
               cep_cfg: CepConfig, seed: int, model_cfg: ModelConfig | None = None,
               cap: int = JOIN_CAP_DEFAULT, step_hook=None) -> MethodRun:
    """Produce the unlearned (or baseline) model for one deletion split.

    stale      returns the original model untouched;
    retrain    trains a fresh model (domains rebuilt from retained tables);
    finetune   continues training the original on the retained join;
    cep        domain-prunes and/or sensitivity-prunes, then fine-tunes.

    The fine-tune RNG stream depends only on ``seed``, so cep with both
    pruning stages disabled is bit-identical to finetune.
    """
    if method not in METHODS:
        raise ValidationError(f"unknown method {method!r}")
    if method != "retrain" and original is None:
        raise ConfigurationError(f"method {method!r} needs the original checkpoint")
    timings = {"prune_seconds": 0.0, "finetune_seconds": 0.0, "train_seconds": 0.0,
               "domain_prune_seconds": 0.0, "sensitivity_prune_seconds": 0.0}

    if method == "stale":
        return MethodRun(method, original.copy(), timings)

    retained_rel = split.retained_join(cap)

    if method == "retrain":
        if model_cfg is None:
            raise ConfigurationError("retrain needs a model config")
        # domains rebuilt from the retained tables: vanished categorical
        # values get no code, mirroring a from-scratch dictionary build
        base_specs = attribute_specs(retained_rel)
        restrict = {}
        for s in base_specs:
            if s.kind == CATEGORICAL:
                tname, cname = s.name.split(".", 1)
                vals = split.retained_table(tname).column(cname)
                restrict[s.name] = np.unique(vals.astype(np.int64))
        t0 = time.perf_counter()
        model = init_model(base_specs, model_cfg, seed=seed, restrict_codes=restrict)
        codes, valid = encode_relation(model, retained_rel)
        trace = train(model, codes[valid], seed, epochs=model_cfg.epochs,
                      step_hook=step_hook)
        timings["train_seconds"] = time.perf_counter() - t0
        return MethodRun(method, model, timings, trace)

    model = original.copy()
    info: dict = {}
    if method == "cep":
        t0 = time.perf_counter()
        if cep_cfg.domain_prune:
            info["domain"] = apply_domain_pruning(model, split, cep_cfg.gap_threshold)
        timings["domain_prune_seconds"] = time.perf_counter() - t0
        t1 = time.perf_counter()
        if cep_cfg.sensitivity_prune:
            prune_rng = np.random.default_rng(
                np.random.SeedSequence(entropy=seed, spawn_key=(1,)))
            info["sensitivity"] = distribution_sensitivity_pruning(
                model, split, cep_cfg, prune_rng, cap=cap)
            if not cep_cfg.freeze_pruned:
                # pruning acted as a targeted reset: the zeroed weights may
                # relearn from retained data during fine-tuning
                release_prune_masks(model)
        timings["sensitivity_prune_seconds"] = time.perf_counter() - t1
        timings["prune_seconds"] = timings["domain_prune_seconds"] + \
            timings["sensitivity_prune_seconds"]

    t2 = time.perf_counter()
    codes, valid = encode_relation(model, retained_rel)
    trace = fine_tune(model, codes[valid], seed, epochs=cep_cfg.finetune_epochs,
                      step_hook=step_hook)
    timings["finetune_seconds"] = time.perf_counter() - t2
    return MethodRun(method, model, timings, trace, info)
