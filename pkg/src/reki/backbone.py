"""CTR backbones consuming id features plus optional augmented vectors.

Two variants share every non-augmented structure:

- ``din``: per-history-step attention scores from an MLP over
  [step, target, step - target, step * target]; scores are NOT
  softmax-normalized (original formulation) and padded steps are masked to
  zero before the weighted sum.
- ``mlp``: the attention block replaced by a masked mean over history steps.

A history step embedding is concat(item emb, category emb) plus a learned
embedding of the step's binary label, so dims match the target embedding
and rated history carries its outcome.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .corpus import FeatureVocab, Sample
from .errors import MetricError, ShapeError
from .nn import Mlp

PAD_ID = 0
LABEL_PAD, LABEL_NEG, LABEL_POS = 0, 1, 2


@dataclass(frozen=True)
class FeatureSchema:
    user_fields: tuple[tuple[str, int], ...]
    item_fields: tuple[tuple[str, int], ...]
    context_fields: tuple[tuple[str, int], ...] = ()
    embedding_dim: int = 32
    history_cap: int = 30

    def __post_init__(self):
        for name, vocab in self.fields:
            if vocab < 1:
                raise ShapeError(f"field {name!r} has vocabulary size {vocab} < 1")

    @property
    def fields(self) -> tuple[tuple[str, int], ...]:
        return (*self.user_fields, *self.item_fields, *self.context_fields)

    @property
    def step_dim(self) -> int:
        """Width of one history step / the target embedding."""
        return 2 * self.embedding_dim

    @classmethod
    def from_vocab(cls, vocab: FeatureVocab, user_profile_fields: Sequence[str],
                   embedding_dim: int = 32, history_cap: int = 30) -> "FeatureSchema":
        user_fields = [("user_id", vocab.size("user_id"))]
        user_fields += [(f, vocab.size(f)) for f in user_profile_fields]
        item_fields = [("item_id", vocab.size("item_id")), ("category", vocab.size("category"))]
        return cls(tuple(user_fields), tuple(item_fields), (),
                   embedding_dim, history_cap)


class BackboneParams:
    """Embedding tables plus attention and output MLPs."""

    def __init__(self, kind: str, schema: FeatureSchema, aug_slots: tuple[str, ...],
                 aug_dim: int, tables: dict[str, T.Tensor], hist_label_table: T.Tensor,
                 att_mlp: Mlp | None, out_mlp: Mlp):
        self.kind = kind
        self.schema = schema
        self.aug_slots = aug_slots
        self.aug_dim = aug_dim
        self.tables = tables
        self.hist_label_table = hist_label_table
        self.att_mlp = att_mlp
        self.out_mlp = out_mlp

    def input_width(self) -> int:
        s = self.schema
        width = len(s.user_fields) * s.embedding_dim
        width += 2 * s.step_dim  # interest vector + target embedding
        width += len(s.context_fields) * s.embedding_dim
        width += len(self.aug_slots) * self.aug_dim
        return width

    def named_parameters(self):
        for name, table in self.tables.items():
            yield f"backbone.emb.{name}", table
        yield "backbone.emb.history_label", self.hist_label_table
        if self.att_mlp is not None:
            yield from self.att_mlp.named_parameters("backbone.attention")
        yield from self.out_mlp.named_parameters("backbone.out")

    def load(self, values: dict[str, np.ndarray]) -> None:
        for name, table in self.tables.items():
            table.data = values[f"backbone.emb.{name}"].copy()
        self.hist_label_table.data = values["backbone.emb.history_label"].copy()
        if self.att_mlp is not None:
            self.att_mlp.load(values, "backbone.attention")
        self.out_mlp.load(values, "backbone.out")


def init_backbone(kind: str, schema: FeatureSchema, aug_slots: Sequence[str] = (),
                  aug_dim: int = 0, seed: int = 0,
                  out_hidden: tuple[int, ...] = (200, 80),
                  att_hidden: tuple[int, ...] = (36,)) -> BackboneParams:
    if kind not in ("din", "mlp"):
        raise ShapeError(f"unknown backbone kind: {kind!r}")
    if aug_slots and aug_dim < 1:
        raise ShapeError("augmented slots declared but aug_dim < 1")
    rng = np.random.default_rng(seed)
    emb = schema.embedding_dim
    tables = {}
    for name, vocab in schema.fields:
        if name in tables:
            continue
        tables[name] = T.param(rng.normal(scale=0.05, size=(vocab, emb)))
    hist_label_table = T.param(rng.normal(scale=0.05, size=(3, schema.step_dim)))
    att_mlp = Mlp.init(rng, 4 * schema.step_dim, att_hidden, 1) if kind == "din" else None
    params = BackboneParams(kind, schema, tuple(aug_slots), aug_dim, tables,
                            hist_label_table, att_mlp, None)
    params.out_mlp = Mlp.init(rng, params.input_width(), out_hidden, 1)
    return params


@dataclass
class EncodedBatch:
    """Dense id arrays padded to the schema's history cap."""

    user_ids: dict[str, np.ndarray]          # field -> (n,)
    hist_item: np.ndarray                     # (n, H)
    hist_cat: np.ndarray                      # (n, H)
    hist_label: np.ndarray                    # (n, H) in {0 pad, 1 neg, 2 pos}
    hist_mask: np.ndarray                     # (n, H) float 0/1
    target_item: np.ndarray                   # (n,)
    target_cat: np.ndarray                    # (n,)
    labels: np.ndarray                        # (n, 1) float

    @property
    def size(self) -> int:
        return self.target_item.shape[0]


def encode_batch(samples: Sequence[Sample], schema: FeatureSchema) -> EncodedBatch:
    n, cap = len(samples), schema.history_cap
    user_ids = {name: np.zeros(n, dtype=np.intp) for name, _ in schema.user_fields}
    hist_item = np.zeros((n, cap), dtype=np.intp)
    hist_cat = np.zeros((n, cap), dtype=np.intp)
    hist_label = np.zeros((n, cap), dtype=np.intp)
    hist_mask = np.zeros((n, cap))
    target_item = np.zeros(n, dtype=np.intp)
    target_cat = np.zeros(n, dtype=np.intp)
    labels = np.zeros((n, 1))
    for i, s in enumerate(samples):
        feats = dict(s.user_features)
        for name in user_ids:
            user_ids[name][i] = feats.get(name, PAD_ID)
        steps = s.history[-cap:] if cap else ()
        for j, (iid, cid, lab) in enumerate(steps):
            hist_item[i, j] = iid
            hist_cat[i, j] = cid
            hist_label[i, j] = LABEL_POS if lab == 1 else LABEL_NEG
            hist_mask[i, j] = 1.0
        target_item[i], target_cat[i] = s.target_item
        labels[i, 0] = s.label
    return EncodedBatch(user_ids, hist_item, hist_cat, hist_label, hist_mask,
                        target_item, target_cat, labels)


def _step_embeddings(batch: EncodedBatch, params: BackboneParams) -> tuple[T.Tensor, T.Tensor]:
    """(history steps (n*H, e), target (n, e)) with the label embedding folded
    into each history step."""
    item_t = params.tables["item_id"]
    cat_t = params.tables["category"]
    flat_item = batch.hist_item.reshape(-1)
    flat_cat = batch.hist_cat.reshape(-1)
    flat_lab = batch.hist_label.reshape(-1)
    steps = T.concat_cols([T.embedding_lookup(item_t, flat_item),
                           T.embedding_lookup(cat_t, flat_cat)])
    steps = T.add(steps, T.embedding_lookup(params.hist_label_table, flat_lab))
    target = T.concat_cols([T.embedding_lookup(item_t, batch.target_item),
                            T.embedding_lookup(cat_t, batch.target_cat)])
    return steps, target


def _interest(batch: EncodedBatch, steps: T.Tensor, target: T.Tensor,
              params: BackboneParams) -> T.Tensor:
    n, cap = batch.hist_mask.shape
    if cap == 0:
        return T.const(np.zeros((n, params.schema.step_dim)))
    mask = T.const(batch.hist_mask.reshape(-1, 1))
    if params.kind == "din":
        target_rep = T.repeat_rows(target, cap)
        att_in = T.concat_cols([steps, target_rep, T.sub(steps, target_rep),
                                T.mul(steps, target_rep)])
        scores = T.mul(params.att_mlp(att_in), mask)
        return T.segment_sum_rows(T.scale_rows(steps, scores), cap)
    # masked mean pooling
    counts = np.maximum(batch.hist_mask.sum(axis=1, keepdims=True), 1.0)
    summed = T.segment_sum_rows(T.scale_rows(steps, mask), cap)
    return T.scale_rows(summed, T.const(1.0 / counts))


def forward_batch(batch: EncodedBatch, aug: Mapping[str, object] | None,
                  params: BackboneParams) -> T.Tensor:
    """Click probabilities (n, 1) for a batch; `aug` maps each configured slot
    name to an (n, aug_dim) array or tape tensor of augmented vectors.

    Passing tensors keeps the adaptor on the tape so it trains jointly;
    passing arrays treats the vectors as frozen (prestored serving)."""
    aug = aug or {}
    if set(aug) != set(params.aug_slots):
        raise ShapeError(f"augmented slots {sorted(aug)} vs configured {sorted(params.aug_slots)}")
    steps, target = _step_embeddings(batch, params)
    parts = [T.embedding_lookup(params.tables[name], batch.user_ids[name])
             for name, _ in params.schema.user_fields]
    parts.append(_interest(batch, steps, target, params))
    parts.append(target)
    for slot in params.aug_slots:
        value = aug[slot]
        tensor = value if isinstance(value, T.Tensor) else T.const(np.asarray(value, dtype=np.float64))
        if tensor.data.shape != (batch.size, params.aug_dim):
            raise ShapeError(
                f"slot {slot!r} shape {tensor.data.shape} vs ({batch.size}, {params.aug_dim})")
        parts.append(tensor)
    return T.sigmoid(params.out_mlp(T.concat_cols(parts)))


def din_attention(history_embs: np.ndarray, target_emb: np.ndarray,
                  params: BackboneParams) -> np.ndarray:
    """Single-sample attention-weighted interest vector; H=0 yields zeros."""
    history_embs = np.asarray(history_embs, dtype=np.float64)
    target_emb = np.asarray(target_emb, dtype=np.float64).reshape(1, -1)
    e = params.schema.step_dim
    if target_emb.shape[1] != e:
        raise ShapeError(f"target dim {target_emb.shape[1]} vs schema step dim {e}")
    if history_embs.size == 0:
        return np.zeros(e)
    if history_embs.shape[1] != e:
        raise ShapeError(f"history dim {history_embs.shape[1]} vs schema step dim {e}")
    h = T.const(history_embs)
    t_rep = T.repeat_rows(T.const(target_emb), history_embs.shape[0])
    att_in = T.concat_cols([h, t_rep, T.sub(h, t_rep), T.mul(h, t_rep)])
    scores = params.att_mlp(att_in)
    return T.segment_sum_rows(T.scale_rows(h, scores), history_embs.shape[0]).data[0]


def predict(sample: Sample, user_aug: np.ndarray | None, item_aug: np.ndarray | None,
            extras: Sequence[np.ndarray], params: BackboneParams) -> float:
    """Click probability for one sample; augmented vectors must match the
    configured slots ("user", "item", then extras in slot order)."""
    aug: dict[str, np.ndarray] = {}
    extra_iter = iter(extras)
    for slot in params.aug_slots:
        if slot == "user":
            vec = user_aug
        elif slot == "item":
            vec = item_aug
        else:
            vec = next(extra_iter, None)
        if vec is None:
            raise ShapeError(f"augmented slot {slot!r} expected but not supplied")
        aug[slot] = np.asarray(vec, dtype=np.float64).reshape(1, -1)
    batch = encode_batch([sample], params.schema)
    return float(forward_batch(batch, aug, params).data[0, 0])


# ---------------------------------------------------------------------------
# loss & metrics
# ---------------------------------------------------------------------------

def bce_loss(probs: T.Tensor, labels: np.ndarray) -> T.Tensor:
    """Batch-averaged binary cross-entropy (tape-recorded)."""
    return T.bce_mean(probs, labels)


def auc(scores, labels) -> float:
    """Rank-statistic AUC with average ranks on ties."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    n = scores.shape[0]
    n_pos = int(labels.sum())
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError(f"AUC needs both classes, got {n_pos} positives of {n}")
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    new_group = np.empty(n, dtype=bool)
    new_group[0] = True
    new_group[1:] = s[1:] != s[:-1]
    group_start = np.flatnonzero(new_group)
    counts = np.diff(np.append(group_start, n))
    avg_rank = group_start + (counts + 1) / 2.0  # 1-based average rank per tie group
    ranks = np.empty(n)
    ranks[order] = np.repeat(avg_rank, counts)
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def logloss(scores, labels) -> float:
    scores = np.clip(np.asarray(scores, dtype=np.float64).reshape(-1), 1e-12, 1 - 1e-12)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    return float(np.mean(-(labels * np.log(scores) + (1 - labels) * np.log(1 - scores))))
