"""Autoregressive density estimator over join-relation columns.

The network is a masked residual MLP: per-column embeddings feed a masked
input layer, a stack of masked residual blocks (two masked linear layers
each), and a masked output layer producing one logit block per column.
Connectivity masks enforce that the logits for the column at position p of
the ordering depend only on columns at positions < p, so the product of
per-column softmax conditionals is a normalized joint distribution.

Everything is float64 and driven by explicit numpy Generators; training,
scoring, and inference are deterministic given seeds.  A separate prune
mask (1 = keep) over the dense-layer weights supports unlearning: pruned
positions hold exactly 0 and their gradients are zeroed, so they stay 0
through any subsequent training.
"""
from __future__ import annotations

import copy
import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .domains import NumericRemap, remap_array
from .errors import (DomainError, EmptyRelationError, FormatError,
                     TrainingError, ValidationError)
from .relational import (CATEGORICAL, NUMERICAL, ColumnSpec, JoinRelation,
                         numeric_bin_index)

CHECKPOINT_MAGIC = b"CEPM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    embedding_dim: int = 16
    hidden_dim: int = 128
    residual_blocks: int = 4
    dropout: float = 0.1
    numeric_bins: int = 64
    column_order: tuple[int, ...] | None = None  # positions -> column index
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 128
    epochs: int = 15

    def validate(self, ncols: int):
        if min(self.embedding_dim, self.hidden_dim, self.residual_blocks) < 1:
            raise ValidationError("model dimensions must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout must lie in [0, 1)")
        if self.numeric_bins < 1:
            raise ValidationError("numeric_bins must be >= 1")
        if self.column_order is not None and sorted(self.column_order) != list(range(ncols)):
            raise ValidationError("column_order is not a permutation of the columns")


@dataclass(eq=False)
class ModelColumn:
    """Current-domain metadata for one model column.

    Categorical columns keep the list of table codes still representable
    (model code = position in that list) plus the aligned original values.
    Numerical columns are dictionary-encoded into ``bins`` equal-width bins
    of [lo, hi]; when a remap is attached, raw values are compacted into
    the gap-free space before binning.
    """
    name: str
    kind: str
    codes: np.ndarray | None = None
    values: np.ndarray | None = None
    dict_size: int = 0
    lo: float = 0.0
    hi: float = 0.0
    bins: int = 0
    remap: NumericRemap | None = None

    @property
    def domain_size(self) -> int:
        return len(self.codes) if self.kind == CATEGORICAL else self.bins

    def code_lut(self) -> np.ndarray:
        lut = np.full(self.dict_size, -1, dtype=np.int64)
        lut[self.codes] = np.arange(len(self.codes), dtype=np.int64)
        return lut


@dataclass(eq=False)
class ArDensityModel:
    cfg: ModelConfig
    columns: list[ModelColumn]
    order: np.ndarray                    # positions -> column index
    embeddings: list[np.ndarray]         # per column: (domain, emb)
    params: dict[str, np.ndarray]
    conn_masks: dict[str, np.ndarray]    # autoregressive connectivity, fixed
    prune_masks: dict[str, np.ndarray]   # 1 = keep; only dense weight keys

    @property
    def ncols(self) -> int:
        return len(self.columns)

    @property
    def positions(self) -> np.ndarray:
        pos = np.empty(self.ncols, dtype=np.int64)
        pos[self.order] = np.arange(self.ncols)
        return pos

    def weight_keys(self) -> list[str]:
        keys = ["w_in"]
        for r in range(self.cfg.residual_blocks):
            keys += [f"w1_{r}", f"w2_{r}"]
        keys.append("w_out")
        return keys

    def logit_offsets(self) -> np.ndarray:
        sizes = [c.domain_size for c in self.columns]
        return np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)

    def column_index(self, name: str) -> int:
        for i, c in enumerate(self.columns):
            if c.name == name:
                return i
        raise ValidationError(f"model has no column {name!r}")

    def copy(self) -> "ArDensityModel":
        return ArDensityModel(
            cfg=self.cfg,
            columns=copy.deepcopy(self.columns),
            order=self.order.copy(),
            embeddings=[e.copy() for e in self.embeddings],
            params={k: v.copy() for k, v in self.params.items()},
            conn_masks={k: v.copy() for k, v in self.conn_masks.items()},
            prune_masks={k: v.copy() for k, v in self.prune_masks.items()},
        )

    def parameter_count(self) -> int:
        n = sum(e.size for e in self.embeddings)
        return n + sum(v.size for v in self.params.values())

    def eligible_weight_count(self) -> int:
        """Dense weight positions allowed by the connectivity masks; this is
        the pool the prune budget is computed over."""
        return int(sum(self.conn_masks[k].sum() for k in self.weight_keys()))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for e in self.embeddings:
            h.update(e.tobytes())
        for k in sorted(self.params):
            h.update(self.params[k].tobytes())
        for k in sorted(self.prune_masks):
            h.update(self.prune_masks[k].tobytes())
        return h.hexdigest()


def model_columns_from_specs(specs: list[ColumnSpec], bins: int,
                             restrict_codes: dict[str, np.ndarray] | None = None
                             ) -> list[ModelColumn]:
    cols = []
    for spec in specs:
        if spec.kind == CATEGORICAL:
            codes = np.arange(spec.domain_size, dtype=np.int64)
            if restrict_codes and spec.name in restrict_codes:
                codes = np.sort(np.asarray(restrict_codes[spec.name], dtype=np.int64))
                if codes.size == 0:
                    raise ValidationError(f"column {spec.name!r} would have an empty domain")
            cols.append(ModelColumn(spec.name, CATEGORICAL, codes=codes,
                                    values=spec.dictionary[codes].copy(),
                                    dict_size=spec.domain_size))
        else:
            cols.append(ModelColumn(spec.name, NUMERICAL, lo=spec.lo, hi=spec.hi,
                                    bins=bins))
    return cols


def _degrees(ncols: int, positions: np.ndarray, emb: int, hidden: int):
    in_deg = np.repeat(positions + 1, emb)
    if ncols >= 2:
        hid_deg = (np.arange(hidden) % (ncols - 1)) + 1
    else:
        hid_deg = np.zeros(hidden, dtype=np.int64)
    return in_deg, hid_deg


def _build_conn_masks(columns, order, cfg) -> dict[str, np.ndarray]:
    ncols = len(columns)
    positions = np.empty(ncols, dtype=np.int64)
    positions[order] = np.arange(ncols)
    in_deg, hid_deg = _degrees(ncols, positions, cfg.embedding_dim, cfg.hidden_dim)
    masks = {"w_in": (hid_deg[None, :] >= in_deg[:, None]).astype(np.float64)}
    hid_mask = (hid_deg[None, :] >= hid_deg[:, None]).astype(np.float64)
    for r in range(cfg.residual_blocks):
        masks[f"w1_{r}"] = hid_mask.copy()
        masks[f"w2_{r}"] = hid_mask.copy()
    out_deg = np.concatenate([np.repeat(positions[i] + 1, columns[i].domain_size)
                              for i in range(ncols)])
    masks["w_out"] = (out_deg[None, :] > hid_deg[:, None]).astype(np.float64)
    return masks


def init_model(specs: list[ColumnSpec], cfg: ModelConfig, seed: int,
               restrict_codes: dict[str, np.ndarray] | None = None) -> ArDensityModel:
    """Fresh model over the given (qualified) column specs.

    Hidden layers get Glorot-uniform weights under the connectivity mask;
    the output layer starts at zero so every conditional begins uniform.
    ``restrict_codes`` limits a categorical column's domain to the given
    table codes (used when training from scratch on retained data).
    """
    columns = model_columns_from_specs(specs, cfg.numeric_bins, restrict_codes)
    if not columns:
        raise ValidationError("model needs at least one column")
    cfg.validate(len(columns))
    order = np.array(cfg.column_order if cfg.column_order is not None
                     else range(len(columns)), dtype=np.int64)

    rng = np.random.default_rng(seed)
    emb, hidden = cfg.embedding_dim, cfg.hidden_dim
    in_dim = emb * len(columns)
    total_logits = sum(c.domain_size for c in columns)

    def glorot(n_in, n_out):
        s = np.sqrt(6.0 / (n_in + n_out))
        return rng.uniform(-s, s, size=(n_in, n_out))

    params = {"w_in": glorot(in_dim, hidden), "b_in": np.zeros(hidden)}
    for r in range(cfg.residual_blocks):
        params[f"w1_{r}"] = glorot(hidden, hidden)
        params[f"b1_{r}"] = np.zeros(hidden)
        params[f"w2_{r}"] = glorot(hidden, hidden)
        params[f"b2_{r}"] = np.zeros(hidden)
    params["w_out"] = np.zeros((hidden, total_logits))
    params["b_out"] = np.zeros(total_logits)

    embeddings = [rng.normal(0.0, 1.0 / np.sqrt(emb), size=(c.domain_size, emb))
                  for c in columns]

    conn = _build_conn_masks(columns, order, cfg)
    for k, m in conn.items():
        params[k] = params[k] * m
    prune = {k: np.ones_like(m) for k, m in conn.items()}
    return ArDensityModel(cfg=cfg, columns=columns, order=order,
                          embeddings=embeddings, params=params,
                          conn_masks=conn, prune_masks=prune)


# ---------------------------------------------------------------------------
# forward / backward


def _effective(model, key):
    return model.params[key] * model.conn_masks[key] * model.prune_masks[key]


def forward(model: ArDensityModel, X: np.ndarray, training: bool = False,
            rng: np.random.Generator | None = None):
    """Logits for a batch of encoded rows; returns (logits, cache).

    ``X`` is (batch, ncols) int codes in current domains.  Dropout is only
    applied when ``training`` is set, drawing masks from ``rng``.
    """
    B = X.shape[0]
    emb = model.cfg.embedding_dim
    A0 = np.empty((B, emb * model.ncols))
    for i in range(model.ncols):
        A0[:, i * emb:(i + 1) * emb] = model.embeddings[i][X[:, i]]

    keep = 1.0 - model.cfg.dropout
    use_dropout = training and model.cfg.dropout > 0.0
    cache = {"X": X, "A0": A0, "blocks": []}

    h = A0 @ _effective(model, "w_in") + model.params["b_in"]
    cache["h0"] = h
    for r in range(model.cfg.residual_blocks):
        a = np.maximum(h, 0.0)
        z = a @ _effective(model, f"w1_{r}") + model.params[f"b1_{r}"]
        c = np.maximum(z, 0.0)
        if use_dropout:
            dmask = (rng.random(c.shape) < keep).astype(np.float64) / keep
            d = c * dmask
        else:
            dmask = None
            d = c
        u = d @ _effective(model, f"w2_{r}") + model.params[f"b2_{r}"]
        h_next = h + u
        cache["blocks"].append({"h": h, "a": a, "z": z, "d": d, "dmask": dmask})
        h = h_next
    cache["h_last"] = h
    hf = np.maximum(h, 0.0)
    cache["hf"] = hf
    logits = hf @ _effective(model, "w_out") + model.params["b_out"]
    return logits, cache


def _log_softmax(block: np.ndarray) -> np.ndarray:
    m = block.max(axis=1, keepdims=True)
    s = block - m
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def batch_nll_terms(model: ArDensityModel, X: np.ndarray, logits: np.ndarray) -> np.ndarray:
    """(batch, ncols) negative log conditionals of the true codes."""
    offs = model.logit_offsets()
    B = X.shape[0]
    terms = np.empty((B, model.ncols))
    for i in range(model.ncols):
        ls = _log_softmax(logits[:, offs[i]:offs[i + 1]])
        terms[:, i] = -ls[np.arange(B), X[:, i]]
    return terms


def nll_terms(model: ArDensityModel, row: np.ndarray) -> np.ndarray:
    """Per-column negative log conditional probabilities of one encoded row."""
    row = np.asarray(row, dtype=np.int64)
    for i, col in enumerate(model.columns):
        if not 0 <= row[i] < col.domain_size:
            raise DomainError(f"code {row[i]} outside current domain of {col.name!r}")
    logits, _ = forward(model, row[None, :])
    return batch_nll_terms(model, row[None, :], logits)[0]


def loss_and_grad(model: ArDensityModel, X: np.ndarray,
                  column_weights: np.ndarray | None = None,
                  training: bool = False, rng: np.random.Generator | None = None):
    """Weighted NLL and its exact gradient, averaged over the batch.

    The loss is mean_batch sum_i w_i * (-log p(col_i | earlier columns)).
    Gradients congruent to params plus one "emb:i" entry per column;
    entries at connectivity-masked or pruned weight positions are zero.
    """
    if column_weights is None:
        w = np.ones(model.ncols)
    else:
        w = np.asarray(column_weights, dtype=np.float64)
        if w.shape != (model.ncols,):
            raise ValidationError("column_weights length must equal the column count")
        if (w < 0).any():
            raise ValidationError("column_weights must be nonnegative")

    B = X.shape[0]
    logits, cache = forward(model, X, training=training, rng=rng)
    offs = model.logit_offsets()
    terms = batch_nll_terms(model, X, logits)
    loss = float((terms * w).sum(axis=1).mean())

    dlogits = np.empty_like(logits)
    for i in range(model.ncols):
        block = logits[:, offs[i]:offs[i + 1]]
        p = np.exp(_log_softmax(block))
        p[np.arange(B), X[:, i]] -= 1.0
        dlogits[:, offs[i]:offs[i + 1]] = p * (w[i] / B)

    grads: dict[str, np.ndarray] = {}
    hf = cache["hf"]
    grads["w_out"] = (hf.T @ dlogits) * model.conn_masks["w_out"] * model.prune_masks["w_out"]
    grads["b_out"] = dlogits.sum(axis=0)
    dhf = dlogits @ _effective(model, "w_out").T
    dh = dhf * (cache["h_last"] > 0.0)

    for r in reversed(range(model.cfg.residual_blocks)):
        blk = cache["blocks"][r]
        du = dh
        grads[f"w2_{r}"] = (blk["d"].T @ du) * model.conn_masks[f"w2_{r}"] * \
            model.prune_masks[f"w2_{r}"]
        grads[f"b2_{r}"] = du.sum(axis=0)
        dd = du @ _effective(model, f"w2_{r}").T
        dc = dd * blk["dmask"] if blk["dmask"] is not None else dd
        dz = dc * (blk["z"] > 0.0)
        grads[f"w1_{r}"] = (blk["a"].T @ dz) * model.conn_masks[f"w1_{r}"] * \
            model.prune_masks[f"w1_{r}"]
        grads[f"b1_{r}"] = dz.sum(axis=0)
        da = dz @ _effective(model, f"w1_{r}").T
        dh = dh + da * (blk["h"] > 0.0)

    grads["w_in"] = (cache["A0"].T @ dh) * model.conn_masks["w_in"] * model.prune_masks["w_in"]
    grads["b_in"] = dh.sum(axis=0)
    dA0 = dh @ _effective(model, "w_in").T
    emb = model.cfg.embedding_dim
    for i in range(model.ncols):
        g = np.zeros_like(model.embeddings[i])
        np.add.at(g, X[:, i], dA0[:, i * emb:(i + 1) * emb])
        grads[f"emb:{i}"] = g
    return loss, grads


def grad_nll(model: ArDensityModel, X: np.ndarray,
             column_weights: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Gradient of the (optionally column-weighted) mean NLL over a batch."""
    _, grads = loss_and_grad(model, X, column_weights)
    return grads


# ---------------------------------------------------------------------------
# training


class AdamState:
    def __init__(self, model: ArDensityModel):
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in model.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in model.params.items()}
        self.m_emb = [np.zeros_like(e) for e in model.embeddings]
        self.v_emb = [np.zeros_like(e) for e in model.embeddings]

    def step(self, model: ArDensityModel, grads: dict[str, np.ndarray]):
        cfg = model.cfg
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t

        def update(p, g, m, v):
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            p -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)

        for k in model.params:
            update(model.params[k], grads[k], self.m[k], self.v[k])
        for i in range(model.ncols):
            update(model.embeddings[i], grads[f"emb:{i}"], self.m_emb[i], self.v_emb[i])
        # keep masked weight positions at exactly 0
        for k in model.weight_keys():
            model.params[k] *= model.conn_masks[k] * model.prune_masks[k]


def train(model: ArDensityModel, data: np.ndarray, seed: int,
          epochs: int | None = None, batch_size: int | None = None,
          step_hook=None) -> list[float]:
    """Adam training on encoded rows, in place; returns the per-step loss trace.

    Shuffles rows each epoch and walks them in batches (so one epoch sees
    every row exactly once).  Dropout is active; all randomness comes from
    a generator seeded with ``seed``.  Raises TrainingError with the step
    index if the loss turns non-finite.
    """
    if data.shape[0] == 0:
        raise EmptyRelationError("cannot train on an empty relation")
    epochs = model.cfg.epochs if epochs is None else epochs
    batch_size = model.cfg.batch_size if batch_size is None else batch_size
    rng = np.random.default_rng(seed)
    adam = AdamState(model)
    trace: list[float] = []
    step = 0
    for _ in range(epochs):
        perm = rng.permutation(data.shape[0])
        for start in range(0, len(perm), batch_size):
            batch = data[perm[start:start + batch_size]]
            loss, grads = loss_and_grad(model, batch, training=True, rng=rng)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at step {step}", step=step)
            adam.step(model, grads)
            trace.append(loss)
            step += 1
            if step_hook is not None:
                step_hook(step, model)
    return trace


# ---------------------------------------------------------------------------
# encoding raw join tuples into current-domain codes


def encode_relation(model: ArDensityModel, rel: JoinRelation,
                    gap_policy: str = "error") -> tuple[np.ndarray, np.ndarray]:
    """Encode a materialized relation into model codes.

    Returns (codes, valid): rows with a categorical value outside the
    model's current domain are marked invalid (there is nothing to map them
    to).  Numeric values inside deleted gaps raise GapError under
    ``gap_policy="error"`` or are clamped to the nearest retained boundary
    under ``"clamp"``.
    """
    if not rel.materialized:
        raise ValidationError("encode_relation needs a materialized relation")
    n = rel.cardinality
    codes = np.zeros((n, model.ncols), dtype=np.int64)
    valid = np.ones(n, dtype=bool)
    for i, col in enumerate(model.columns):
        raw = rel.column(col.name)
        if col.kind == CATEGORICAL:
            mapped = col.code_lut()[raw.astype(np.int64)]
            valid &= mapped >= 0
            codes[:, i] = np.where(mapped >= 0, mapped, 0)
        else:
            vals = raw.astype(np.float64)
            if col.remap is not None:
                vals = remap_array(col.remap, vals, on_gap=gap_policy)
            codes[:, i] = numeric_bin_index(vals, col.lo, col.hi, col.bins)
    return codes, valid


# ---------------------------------------------------------------------------
# inference


def estimate_selectivity(model: ArDensityModel, constraints: dict[str, np.ndarray],
                         num_samples: int = 512,
                         rng: np.random.Generator | None = None,
                         with_error: bool = False):
    """Progressive-sampling estimate of the probability mass satisfying all
    per-column constraints.

    ``constraints`` maps column names to weight vectors over the column's
    current domain (entries in [0, 1]; fractional entries express partial
    bin overlap).  Paths walk the model's column order: at a constrained
    column the running weight is multiplied by the conditional mass of the
    satisfying set and the next value is drawn from the restricted
    conditional; unconstrained columns are sampled freely.  Columns after
    the last constrained position cannot change the estimate and are
    skipped.

    With ``with_error`` the Monte-Carlo standard error of the path-weight
    mean is returned alongside the estimate.
    """
    for name in constraints:
        model.column_index(name)  # raises on unknown column
    if not constraints:
        return (1.0, 0.0) if with_error else 1.0
    if rng is None:
        rng = np.random.default_rng(0)

    by_pos = {}
    pos = model.positions
    for name, wv in constraints.items():
        i = model.column_index(name)
        wv = np.asarray(wv, dtype=np.float64)
        if wv.shape != (model.columns[i].domain_size,):
            raise ValidationError(f"constraint on {name!r} has wrong length")
        by_pos[int(pos[i])] = (i, wv)
    last_pos = max(by_pos)

    n = num_samples
    X = np.zeros((n, model.ncols), dtype=np.int64)
    weight = np.ones(n)
    offs = model.logit_offsets()
    for p in range(last_pos + 1):
        i = int(model.order[p])
        logits, _ = forward(model, X)
        block = logits[:, offs[i]:offs[i + 1]]
        probs = np.exp(_log_softmax(block))
        if p in by_pos:
            _, wv = by_pos[p]
            mass = probs @ wv
            weight *= mass
            probs = probs * wv
        if p < last_pos:
            totals = probs.sum(axis=1)
            alive = totals > 0.0
            cdf = np.cumsum(probs, axis=1)
            u = rng.random(n) * np.where(alive, totals, 1.0)
            nxt = np.minimum((cdf < u[:, None]).sum(axis=1), probs.shape[1] - 1)
            X[:, i] = np.where(alive, nxt, 0)
            weight = np.where(alive, weight, 0.0)
    if with_error:
        sem = float(weight.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
        return float(weight.mean()), sem
    return float(weight.mean())


def estimate_cardinality(model: ArDensityModel, constraints: dict[str, np.ndarray],
                         total_rows: int, num_samples: int = 512,
                         rng: np.random.Generator | None = None) -> float:
    return estimate_selectivity(model, constraints, num_samples, rng) * total_rows


def interval_bin_weights(lo: float, hi: float, col_lo: float, col_hi: float,
                         bins: int) -> np.ndarray:
    """Per-bin overlap fraction of [lo, hi] with each equal-width bin of
    [col_lo, col_hi].  Fully covered bins get 1, boundary bins the covered
    fraction of their width."""
    w = np.zeros(bins)
    if hi < lo or col_hi <= col_lo:
        return w
    scale = bins / (col_hi - col_lo)
    blo = (max(lo, col_lo) - col_lo) * scale
    bhi = (min(hi, col_hi) - col_lo) * scale
    edges = np.arange(bins + 1, dtype=np.float64)
    overlap = np.minimum(bhi, edges[1:]) - np.maximum(blo, edges[:-1])
    return np.clip(overlap, 0.0, 1.0)


# ---------------------------------------------------------------------------
# checkpoints


def _column_meta(col: ModelColumn) -> dict:
    meta = {"name": col.name, "kind": col.kind}
    if col.kind == CATEGORICAL:
        meta["codes"] = [int(v) for v in col.codes]
        meta["values"] = [int(v) for v in col.values]
        meta["dict_size"] = col.dict_size
    else:
        meta["lo"], meta["hi"], meta["bins"] = col.lo, col.hi, col.bins
        if col.remap is not None:
            meta["remap"] = {"lo": col.remap.lo, "hi": col.remap.hi,
                             "subranges": [[a, b] for a, b in col.remap.subranges]}
        else:
            meta["remap"] = None
    return meta


def _column_from_meta(meta: dict) -> ModelColumn:
    if meta["kind"] == CATEGORICAL:
        return ModelColumn(meta["name"], CATEGORICAL,
                           codes=np.array(meta["codes"], dtype=np.int64),
                           values=np.array(meta["values"], dtype=np.int64),
                           dict_size=meta["dict_size"])
    remap = None
    if meta.get("remap"):
        remap = NumericRemap(meta["remap"]["lo"], meta["remap"]["hi"],
                             tuple((a, b) for a, b in meta["remap"]["subranges"]))
    return ModelColumn(meta["name"], NUMERICAL, lo=meta["lo"], hi=meta["hi"],
                       bins=meta["bins"], remap=remap)


def _array_sequence(model: ArDensityModel):
    seq = [(f"emb:{i}", model.embeddings[i]) for i in range(model.ncols)]
    seq += [(k, model.params[k]) for k in sorted(model.params)]
    seq += [(f"prune:{k}", model.prune_masks[k]) for k in model.weight_keys()]
    return seq


def save_checkpoint(model: ArDensityModel, path: str | Path):
    """Binary checkpoint: magic, version, JSON metadata, float64 LE arrays,
    trailing 8-byte SHA-256 prefix over everything before it."""
    meta = {
        "config": asdict(model.cfg),
        "order": [int(v) for v in model.order],
        "columns": [_column_meta(c) for c in model.columns],
        "arrays": [{"key": k, "shape": list(a.shape)} for k, a in _array_sequence(model)],
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    body = bytearray()
    body += CHECKPOINT_MAGIC
    body += struct.pack("<I", CHECKPOINT_VERSION)
    body += struct.pack("<I", len(meta_bytes))
    body += meta_bytes
    for _, a in _array_sequence(model):
        body += np.ascontiguousarray(a, dtype="<f8").tobytes()
    digest = hashlib.sha256(bytes(body)).digest()[:8]
    Path(path).write_bytes(bytes(body) + digest)


def load_checkpoint(path: str | Path) -> ArDensityModel:
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    body, digest = raw[:-8], raw[-8:]
    if hashlib.sha256(body).digest()[:8] != digest:
        raise FormatError(f"{path}: checksum mismatch")
    version, = struct.unpack("<I", body[4:8])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    meta_len, = struct.unpack("<I", body[8:12])
    meta = json.loads(body[12:12 + meta_len].decode())
    cfg_dict = dict(meta["config"])
    if cfg_dict.get("column_order") is not None:
        cfg_dict["column_order"] = tuple(cfg_dict["column_order"])
    cfg = ModelConfig(**cfg_dict)
    columns = [_column_from_meta(m) for m in meta["columns"]]
    order = np.array(meta["order"], dtype=np.int64)

    offset = 12 + meta_len
    arrays = {}
    for spec in meta["arrays"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=offset).reshape(shape)
        arrays[spec["key"]] = arr.astype(np.float64)
        offset += count * 8
    if offset != len(body):
        raise FormatError(f"{path}: trailing bytes in checkpoint")

    embeddings = [arrays[f"emb:{i}"] for i in range(len(columns))]
    conn = _build_conn_masks(columns, order, cfg)
    params = {k: arrays[k] for k in arrays
              if not k.startswith("emb:") and not k.startswith("prune:")}
    prune = {k: arrays[f"prune:{k}"] for k in conn}
    return ArDensityModel(cfg=cfg, columns=columns, order=order,
                          embeddings=embeddings, params=params,
                          conn_masks=conn, prune_masks=prune)
