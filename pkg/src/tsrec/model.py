"""Score fusion, cross-entropy training with negative sampling, and checkpoints.

A score run gathers embeddings for one batch of (user, position, candidate)
rows, pushes them through the three representation modules, fuses with the
user embedding through a two-layer MLP, and takes a sigmoid dot product with
the candidate item embedding.  Training is plain mini-batch Adam with
per-epoch validation ranking and patience-based early stopping.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass

import numpy as np

from . import engine
from .config import ModelConfig
from .data import FeatureBatch, FeatureProvider, InteractionLog, sample_negatives
from .engine import Tensor
from .itrm import ITRMParams, itrm_forward
from .optim import ParameterStore, adam_step, glorot_uniform
from .sram import SRAMParams, sram_forward
from .utrm import UTRMParams, utrm_forward

CHECKPOINT_MAGIC = "TSRECCKPT 1"
LOSS_EPS = 1e-12


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class EmbeddingTables:
    item: Tensor      # (n_items + 1, d); row 0 is padding, frozen at zero
    user: Tensor      # (n_users + 1, d)
    interval: Tensor  # (bin_max + 2, d); last row is the NEW sentinel

    @classmethod
    def init(cls, store: ParameterStore, cfg: ModelConfig, n_users: int,
             n_items: int, rng: np.random.Generator) -> "EmbeddingTables":
        item = glorot_uniform((n_items + 1, cfg.d), rng)
        item[0] = 0.0
        # interval rows use d-based fans (not vocab-based) so same-bin attention
        # logits start at a usable scale regardless of bin_max
        return cls(item=store.add("emb.item", item),
                   user=store.add("emb.user", glorot_uniform((n_users + 1, cfg.d), rng)),
                   interval=store.add("emb.interval",
                                      glorot_uniform((cfg.bin_max + 2, cfg.d), rng,
                                                     fan_in=cfg.d, fan_out=cfg.d)))

    @classmethod
    def from_store(cls, store: ParameterStore) -> "EmbeddingTables":
        return cls(store.get("emb.item"), store.get("emb.user"), store.get("emb.interval"))


@dataclass
class FusionParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, store: ParameterStore, d: int, rng) -> "FusionParams":
        return cls(w1=store.add("fuse.l1.w", glorot_uniform((d, 4 * d), rng)),
                   b1=store.add("fuse.l1.b", glorot_uniform((d,), rng,
                                                            fan_in=4 * d, fan_out=d)),
                   w2=store.add("fuse.l2.w", glorot_uniform((d, d), rng)),
                   b2=store.add("fuse.l2.b", glorot_uniform((d,), rng,
                                                            fan_in=d, fan_out=d)))

    @classmethod
    def from_store(cls, store: ParameterStore) -> "FusionParams":
        return cls(store.get("fuse.l1.w"), store.get("fuse.l1.b"),
                   store.get("fuse.l2.w"), store.get("fuse.l2.b"))


class Model:
    """All parameters plus the batched forward pass."""

    def __init__(self, cfg: ModelConfig, n_users: int, n_items: int,
                 store: ParameterStore | None = None,
                 rng: np.random.Generator | None = None):
        cfg.validate()
        self.cfg = cfg
        self.n_users = n_users
        self.n_items = n_items
        if store is None:
            if rng is None:
                rng = np.random.default_rng(cfg.seed)
            store = ParameterStore()
            self.tables = EmbeddingTables.init(store, cfg, n_users, n_items, rng)
            self.utrm = UTRMParams.init(store, cfg.d, rng)
            self.itrm = ITRMParams.init(store, cfg.d, cfg.conv_channels, rng)
            self.sram = SRAMParams.init(store, cfg.d, cfg.seq_len, rng, cfg.conv1d_widths)
            self.fusion = FusionParams.init(store, cfg.d, rng)
        else:
            self.tables = EmbeddingTables.from_store(store)
            self.utrm = UTRMParams.from_store(store)
            self.itrm = ITRMParams.from_store(store)
            self.sram = SRAMParams.from_store(store, cfg.conv1d_widths)
            self.fusion = FusionParams.from_store(store)
        self.store = store

    def _check_ids(self, batch: FeatureBatch):
        if batch.user.max(initial=0) > self.n_users or batch.user.min(initial=1) < 1:
            raise ValueError("user id outside vocabulary")
        for arr in (batch.item, batch.behavior, batch.last_repeat):
            if arr.max(initial=0) > self.n_items or arr.min(initial=0) < 0:
                raise ValueError("item id outside vocabulary")

    def forward_scores(self, batch: FeatureBatch, training: bool = False,
                       rng: np.random.Generator | None = None) -> Tensor:
        """Sigmoid click scores for every row of the batch -> Tensor (R,)."""
        cfg = self.cfg
        self._check_ids(batch)
        R = batch.rows
        if training and cfg.dropout > 0.0:
            if rng is None:
                raise ValueError("training forward with dropout needs an rng")
            drop = lambda t: engine.dropout(t, cfg.dropout, rng)  # noqa: E731
        else:
            drop = lambda t: t  # noqa: E731

        e_u = drop(engine.embedding(self.tables.user, batch.user))
        e_v = engine.embedding(self.tables.item, batch.item)

        if cfg.use_utrm:
            e_t = drop(engine.embedding(self.tables.interval, batch.target_bin))
            E_h = drop(engine.embedding(self.tables.interval, batch.hist_bins))
            o_ut = utrm_forward(e_t, E_h, batch.hist_mask, self.utrm)
        else:
            o_ut = Tensor(np.zeros((R, cfg.d)))

        if cfg.use_itrm:
            # matrix features depend only on the candidate item, so run the
            # convolutions once per unique item and gather rows back
            uniq, first, inverse = np.unique(batch.item, return_index=True,
                                             return_inverse=True)
            E_P = drop(engine.embedding(self.tables.interval, batch.rtim_bins[first]))
            o_it_uniq = itrm_forward(E_P, batch.rtim_mask[first], self.itrm)
            o_it = engine.gather_rows(o_it_uniq, inverse)
        else:
            o_it = Tensor(np.zeros((R, cfg.d)))

        if cfg.use_sram:
            E_b = drop(engine.embedding(self.tables.item, batch.behavior))
            E_l = drop(engine.embedding(self.tables.item, batch.last_repeat))
            o_sr = sram_forward(E_b, E_l, batch.behavior_mask, batch.last_repeat_mask,
                                self.sram, drop)
        else:
            o_sr = Tensor(np.zeros((R, cfg.d)))

        fused = engine.concat([o_ut, o_it, o_sr, e_u], axis=1)
        h1 = drop(engine.relu(fused @ engine.transpose(self.fusion.w1, (1, 0))
                              + self.fusion.b1))
        o = engine.relu(h1 @ engine.transpose(self.fusion.w2, (1, 0)) + self.fusion.b2)
        return engine.sigmoid((o * e_v).sum(axis=1))

    def score_rows(self, batch: FeatureBatch) -> np.ndarray:
        """Evaluation-mode scores as a plain array."""
        with engine.no_grad():
            return self.forward_scores(batch).data.copy()


def batch_loss(scores: Tensor, labels: np.ndarray) -> Tensor:
    """Cross-entropy over positive and negative rows, averaged per positive.

    Scores are clamped to [eps, 1 - eps] before the logs so perfect
    predictions stay finite.
    """
    n_pos = float(labels.sum())
    if n_pos == 0:
        raise ValueError("batch contains no positive rows")
    y = engine.clip(scores, LOSS_EPS, 1.0 - LOSS_EPS)
    pos_term = engine.log(y) * Tensor(labels)
    neg_term = engine.log(Tensor(1.0) - y) * Tensor(1.0 - labels)
    return engine.scale((pos_term + neg_term).sum(), -1.0 / n_pos)


@dataclass
class TrainResult:
    store: ParameterStore       # best-validation weights
    history: list               # one dict per epoch
    best_epoch: int
    epochs_run: int


def _val_rank_metrics(model: Model, batch: FeatureBatch, group: int) -> tuple:
    """(HR@10, NDCG@10) over fixed candidate groups of size `group`."""
    scores = model.score_rows(batch).reshape(-1, group)
    items = batch.item.reshape(-1, group)
    hits = 0.0
    gain = 0.0
    for row_scores, row_items in zip(scores, items):
        order = np.lexsort((row_items, -row_scores))
        rank = int(np.where(order == 0)[0][0]) + 1  # row 0 is the positive
        if rank <= 10:
            hits += 1.0
            gain += 1.0 / math.log2(rank + 1)
    n = len(scores)
    return hits / n, gain / n


def train(cfg: ModelConfig, provider: FeatureProvider,
          log_fn=None) -> tuple[Model, TrainResult]:
    """Mini-batch Adam with per-epoch validation ranking and early stopping.

    Deterministic given cfg.seed: initialization, shuffling, negative
    sampling, and dropout all derive from it.  Validation negatives are fixed
    once; training negatives are resampled each epoch unless configured off.
    Early stopping tracks val NDCG@10 (HR@10 saturates over 4 candidates) and
    stops after `patience` epochs without improvement.
    """
    train_instances = provider.instances("train")
    val_instances = provider.instances("val")
    if not train_instances or not val_instances:
        raise ValueError(f"empty split: {len(train_instances)} train / "
                         f"{len(val_instances)} val instances")

    ss = np.random.SeedSequence(cfg.seed)
    init_rng, shuffle_rng, neg_rng, val_neg_rng, drop_rng = (
        np.random.default_rng(s) for s in ss.spawn(5))

    model = Model(cfg, provider.log.n_users, provider.log.n_items, rng=init_rng)
    n_items = provider.log.n_items

    val_negs = {i: sample_negatives(provider.exclusion[ins.user_id], cfg.val_negatives,
                                    val_neg_rng, n_items)
                for i, ins in enumerate(val_instances)}
    val_batch = provider.assemble_instances(val_instances, val_negs)
    val_group = 1 + cfg.val_negatives

    history: list = []
    best_metric = -1.0
    best_store = model.store.clone()
    best_epoch = 0
    bad_epochs = 0
    train_negs = None

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(len(train_instances))
        if train_negs is None or cfg.resample_negatives:
            train_negs = [sample_negatives(provider.exclusion[ins.user_id],
                                           cfg.train_negatives, neg_rng, n_items)
                          for ins in train_instances]
        total_loss = 0.0
        total_pos = 0
        for b0 in range(0, len(order), cfg.batch_size):
            chunk = order[b0:b0 + cfg.batch_size]
            rows = []
            for idx in chunk:
                ins = train_instances[idx]
                rows.append((ins.user_id, ins.position, ins.target_item_id, 1.0))
                for neg in train_negs[idx]:
                    rows.append((ins.user_id, ins.position, int(neg), 0.0))
            batch = provider.assemble(rows)
            scores = model.forward_scores(batch, training=True, rng=drop_rng)
            loss = batch_loss(scores, batch.label)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {b0 // cfg.batch_size}")
            model.store.zero_grad()
            loss.backward()
            item_grad = model.tables.item.grad
            if item_grad is not None:
                item_grad[0] = 0.0  # keep the padding row frozen at zero
            adam_step(model.store, lr=cfg.lr)
            total_loss += float(loss.data) * len(chunk)
            total_pos += len(chunk)

        val_hr, val_ndcg = _val_rank_metrics(model, val_batch, val_group)
        record = {"epoch": epoch, "train_loss": total_loss / total_pos,
                  "val_hr10": val_hr, "val_ndcg10": val_ndcg,
                  "wall_time_s": time.perf_counter() - t0}
        history.append(record)
        if log_fn:
            log_fn(record)

        if val_ndcg > best_metric:
            best_metric = val_ndcg
            best_store.copy_values_from(model.store)
            best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
        if bad_epochs >= cfg.patience:
            break

    model.store.copy_values_from(best_store)
    return model, TrainResult(store=model.store, history=history,
                              best_epoch=best_epoch, epochs_run=len(history))


# ---------------------------------------------------------------------------
# popularity baseline
# ---------------------------------------------------------------------------

class PopRec:
    """Ranks items by training-set frequency; ties break by ascending id."""

    def __init__(self, counts: np.ndarray):
        self.counts = counts

    def score_items(self, item_ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(item_ids)
        out = np.zeros(ids.shape, dtype=np.float64)
        known = ids <= len(self.counts) - 1
        out[known] = self.counts[ids[known]]
        return out


def pop_rec_baseline(train_log: InteractionLog) -> PopRec:
    return PopRec(np.bincount(train_log.item_ids,
                              minlength=train_log.n_items + 1).astype(np.float64))


# ---------------------------------------------------------------------------
# checkpoints and history files
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: Model, meta: dict):
    """Single-file checkpoint: magic line, JSON meta+config line, store bytes."""
    import dataclasses

    payload = {"config": dataclasses.asdict(model.cfg),
               "n_users": model.n_users, "n_items": model.n_items, **meta}
    with open(path, "wb") as f:
        f.write((CHECKPOINT_MAGIC + "\n").encode("utf-8"))
        f.write((json.dumps(payload, sort_keys=True) + "\n").encode("utf-8"))
        f.write(model.store.to_bytes())


def load_checkpoint(path) -> tuple[Model, dict]:
    with open(path, "rb") as f:
        magic = f.readline().decode("utf-8").strip()
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (got {magic!r})")
        payload = json.loads(f.readline().decode("utf-8"))
        store = ParameterStore.from_bytes(f.read())
    cfg_dict = payload["config"]
    for key in ("conv1d_widths", "split_fractions"):
        cfg_dict[key] = tuple(cfg_dict[key])
    cfg = ModelConfig(**cfg_dict)
    model = Model(cfg, payload["n_users"], payload["n_items"], store=store)
    return model, payload


def write_history(history: list, path, header: dict):
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps({"header": header}, sort_keys=True) + "\n")
        for record in history:
            f.write(json.dumps(record, sort_keys=True) + "\n")


def read_history(path) -> tuple[dict, list]:
    with open(path, encoding="utf-8") as f:
        lines = [json.loads(line) for line in f if line.strip()]
    return lines[0]["header"], lines[1:]
