"""Server-side recall: biased matrix factorization over public interactions.

Trains on the public store only (positives = logged feedback >= 0.5,
negatives sampled from un-interacted items) and reduces the M-item catalog
to K candidates per user. Popularity recall doubles as the cold-start and
baseline source.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset
from .errors import (
    ConfigurationError,
    DivergenceError,
    EmptyCatalogError,
    LookupError_,
)
from .numerics import sigmoid

POSITIVE_FEEDBACK_THRESHOLD = 0.5
CHECKPOINT_VERSION = 1
INIT_SCALE = 0.01


@dataclass(frozen=True)
class RecallHyper:
    r: int = 8
    learning_rate: float = 0.05
    l2_reg: float = 0.01
    epochs: int = 10
    negative_samples_per_positive: int = 4

    def validate(self) -> list[str]:
        problems = []
        if self.r < 1:
            problems.append(f"recall r must be >= 1, got {self.r}")
        if self.learning_rate <= 0:
            problems.append(f"recall learning_rate must be > 0, got {self.learning_rate}")
        if self.l2_reg < 0:
            problems.append(f"recall l2_reg must be >= 0, got {self.l2_reg}")
        if self.epochs < 1:
            problems.append(f"recall epochs must be >= 1, got {self.epochs}")
        if self.negative_samples_per_positive < 0:
            problems.append(
                "recall negative_samples_per_positive must be >= 0, "
                f"got {self.negative_samples_per_positive}"
            )
        return problems


@dataclass(frozen=True, eq=False)
class RecallModel:
    user_ids: np.ndarray  # shape (N,)
    item_ids: np.ndarray  # shape (M,)
    user_factors: np.ndarray  # N x r
    item_factors: np.ndarray  # M x r
    user_bias: np.ndarray  # (N,)
    item_bias: np.ndarray  # (M,)
    global_mean: float
    popularity_table: dict  # item_id -> count
    r: int
    seen_items: dict  # user_id -> frozenset of interacted item ids

    def user_index(self, user_id: int) -> int:
        idx = np.searchsorted(self.user_ids, user_id)
        if idx >= len(self.user_ids) or self.user_ids[idx] != user_id:
            raise LookupError_(f"user {user_id} unknown to recall model")
        return int(idx)

    def score_all(self, user_id: int) -> np.ndarray:
        """Linear score for every catalog item, in model item order."""
        u = self.user_index(user_id)
        return (
            self.global_mean
            + self.user_bias[u]
            + self.item_bias
            + self.item_factors @ self.user_factors[u]
        )


@dataclass(frozen=True)
class CandidateSet:
    user_id: int
    items: tuple  # ((item_id, recall_score), ...) score non-increasing
    degenerate: bool = False

    @property
    def item_ids(self) -> list[int]:
        return [iid for iid, _ in self.items]

    def to_dict(self) -> dict:
        return {
            "user_id": int(self.user_id),
            "items": [[int(i), float(s)] for i, s in self.items],
            "degenerate": bool(self.degenerate),
        }


def mf_sample_loss(
    u_vec: np.ndarray,
    v_vec: np.ndarray,
    b_u: float,
    b_i: float,
    mu: float,
    label: float,
    l2_reg: float,
) -> float:
    """Per-sample squared-error loss on the sigmoid prediction, plus L2."""
    p = sigmoid(mu + b_u + b_i + float(u_vec @ v_vec))
    reg = l2_reg * (u_vec @ u_vec + v_vec @ v_vec + b_u * b_u + b_i * b_i)
    return 0.5 * (p - label) ** 2 + 0.5 * reg


def mf_sample_gradient(
    u_vec: np.ndarray,
    v_vec: np.ndarray,
    b_u: float,
    b_i: float,
    mu: float,
    label: float,
    l2_reg: float,
):
    """Analytic gradient of mf_sample_loss w.r.t. (u_vec, v_vec, b_u, b_i)."""
    p = sigmoid(mu + b_u + b_i + float(u_vec @ v_vec))
    c = (p - label) * p * (1.0 - p)
    g_u = c * v_vec + l2_reg * u_vec
    g_v = c * u_vec + l2_reg * v_vec
    g_bu = c + l2_reg * b_u
    g_bi = c + l2_reg * b_i
    return g_u, g_v, g_bu, g_bi


def train_recall(dataset: Dataset, hyper: RecallHyper, seed: int) -> RecallModel:
    """Sequential SGD matrix factorization on the public interaction log.

    Deterministic for fixed (dataset, hyper, seed); never touches private
    shards. Users without interactions keep their initialization.
    """
    problems = hyper.validate()
    if problems:
        raise ConfigurationError(problems)

    rng = np.random.default_rng(seed)
    user_ids = np.array(sorted(dataset.user_ids))
    item_ids = np.array(sorted(dataset.item_ids))
    n, m = len(user_ids), len(item_ids)
    uindex = {int(uid): i for i, uid in enumerate(user_ids)}
    iindex = {int(iid): i for i, iid in enumerate(item_ids)}

    user_factors = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(n, hyper.r))
    item_factors = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(m, hyper.r))
    user_bias = np.zeros(n)
    item_bias = np.zeros(m)

    feedbacks = [
        ev.feedback for u in dataset.public_store for ev in u.interaction_log
    ]
    global_mean = float(np.mean(feedbacks)) if feedbacks else 0.0

    positives = []  # (user_idx, item_idx, label)
    seen: dict[int, frozenset] = {}
    unseen_pools: dict[int, np.ndarray] = {}
    for u in dataset.public_store:
        ui = uindex[u.user_id]
        seen_ids = frozenset(ev.item_id for ev in u.interaction_log)
        seen[u.user_id] = seen_ids
        unseen = np.array(
            [iindex[iid] for iid in item_ids.tolist() if iid not in seen_ids], dtype=int
        )
        unseen_pools[ui] = unseen
        for ev in u.interaction_log:
            if ev.feedback >= POSITIVE_FEEDBACK_THRESHOLD:
                positives.append((ui, iindex[ev.item_id], ev.feedback))

    lr, l2 = hyper.learning_rate, hyper.l2_reg

    def step(ui: int, ii: int, label: float) -> None:
        g_u, g_v, g_bu, g_bi = mf_sample_gradient(
            user_factors[ui], item_factors[ii],
            user_bias[ui], item_bias[ii], global_mean, label, l2,
        )
        user_factors[ui] -= lr * g_u
        item_factors[ii] -= lr * g_v
        user_bias[ui] -= lr * g_bu
        item_bias[ii] -= lr * g_bi

    for epoch in range(hyper.epochs):
        order = rng.permutation(len(positives))
        for k in order:
            ui, ii, label = positives[k]
            step(ui, ii, label)
            pool = unseen_pools[ui]
            n_neg = min(hyper.negative_samples_per_positive, len(pool))
            if n_neg:
                for ni in rng.choice(pool, size=n_neg, replace=False):
                    step(ui, int(ni), 0.0)
        if not (
            np.isfinite(user_factors).all()
            and np.isfinite(item_factors).all()
            and np.isfinite(user_bias).all()
            and np.isfinite(item_bias).all()
        ):
            raise DivergenceError(f"recall training diverged at epoch {epoch}")

    popularity = {int(it.item_id): int(it.popularity_count) for it in dataset.catalog}
    return RecallModel(
        user_ids=user_ids,
        item_ids=item_ids,
        user_factors=user_factors,
        item_factors=item_factors,
        user_bias=user_bias,
        item_bias=item_bias,
        global_mean=global_mean,
        popularity_table=popularity,
        r=hyper.r,
        seen_items=seen,
    )


def _top_k_by_score(item_ids: np.ndarray, scores: np.ndarray, k: int):
    """Indices of the top-k scores, ties broken by ascending item id."""
    order = np.lexsort((item_ids, -scores))
    return order[:k]


def recall_top_k(
    model: RecallModel, user_id: int, catalog, k: int, exclude_seen: bool = True
) -> CandidateSet:
    """Top-K candidates by recall score over the full catalog.

    K larger than the available pool returns everything and flags the set
    degenerate instead of failing.
    """
    if k < 1:
        raise ConfigurationError(f"K must be >= 1, got {k}")
    catalog_ids = {int(it.item_id) for it in catalog}
    keep = np.array([i for i, iid in enumerate(model.item_ids) if int(iid) in catalog_ids])
    if len(keep) == 0:
        raise EmptyCatalogError("no catalog items known to the recall model")
    scores = model.score_all(user_id)[keep]
    ids = model.item_ids[keep]
    if exclude_seen:
        seen = model.seen_items.get(int(user_id), frozenset())
        mask = np.array([int(iid) not in seen for iid in ids])
        ids, scores = ids[mask], scores[mask]
    degenerate = k > len(ids)
    take = min(k, len(ids))
    sel = _top_k_by_score(ids, scores, take)
    items = tuple((int(ids[i]), float(scores[i])) for i in sel)
    return CandidateSet(int(user_id), items, degenerate)


def popularity_top_k(dataset: Dataset, k: int) -> tuple:
    """Top-K (item_id, count) pairs by popularity, ties by ascending id."""
    if k < 1:
        raise ConfigurationError(f"K must be >= 1, got {k}")
    if not dataset.catalog:
        raise EmptyCatalogError("catalog is empty")
    ids = np.array([it.item_id for it in dataset.catalog])
    counts = np.array([it.popularity_count for it in dataset.catalog], dtype=float)
    take = min(k, len(ids))
    sel = _top_k_by_score(ids, counts, take)
    return tuple((int(ids[i]), float(counts[i])) for i in sel)


def popularity_recall(dataset: Dataset, k: int) -> dict[int, CandidateSet]:
    """Identical popularity-ordered candidate set for every user."""
    items = popularity_top_k(dataset, k)
    degenerate = k > dataset.n_items
    return {
        uid: CandidateSet(uid, items, degenerate) for uid in dataset.user_ids
    }


# -- checkpointing ---------------------------------------------------------


def _checkpoint_path(path) -> Path:
    path = Path(path)
    return path if path.suffix == ".npz" else Path(str(path) + ".npz")


def save_model(model: RecallModel, path) -> None:
    """Versioned binary dump; round-trips exactly (float64 preserved)."""
    path = _checkpoint_path(path)
    seen_users = np.array(sorted(model.seen_items))
    indptr = [0]
    flat: list[int] = []
    for uid in seen_users.tolist():
        flat.extend(sorted(model.seen_items[uid]))
        indptr.append(len(flat))
    pop_ids = np.array(sorted(model.popularity_table))
    meta = json.dumps({"version": CHECKPOINT_VERSION, "r": model.r,
                       "global_mean": model.global_mean})
    np.savez(
        path,
        meta=np.frombuffer(meta.encode("ascii"), dtype=np.uint8),
        user_ids=model.user_ids,
        item_ids=model.item_ids,
        user_factors=model.user_factors,
        item_factors=model.item_factors,
        user_bias=model.user_bias,
        item_bias=model.item_bias,
        pop_ids=pop_ids,
        pop_counts=np.array([model.popularity_table[i] for i in pop_ids.tolist()]),
        seen_users=seen_users,
        seen_indptr=np.array(indptr),
        seen_flat=np.array(flat, dtype=int),
    )


def load_model(path) -> RecallModel:
    with np.load(_checkpoint_path(path)) as z:
        meta = json.loads(bytes(z["meta"]).decode("ascii"))
        if meta["version"] != CHECKPOINT_VERSION:
            raise ConfigurationError(
                f"unsupported checkpoint version {meta['version']}"
            )
        seen: dict[int, frozenset] = {}
        indptr = z["seen_indptr"]
        flat = z["seen_flat"]
        for i, uid in enumerate(z["seen_users"].tolist()):
            seen[int(uid)] = frozenset(int(x) for x in flat[indptr[i]:indptr[i + 1]])
        popularity = {
            int(i): int(c) for i, c in zip(z["pop_ids"].tolist(), z["pop_counts"].tolist())
        }
        return RecallModel(
            user_ids=z["user_ids"],
            item_ids=z["item_ids"],
            user_factors=z["user_factors"],
            item_factors=z["item_factors"],
            user_bias=z["user_bias"],
            item_bias=z["item_bias"],
            global_mean=float(meta["global_mean"]),
            popularity_table=popularity,
            r=int(meta["r"]),
            seen_items=seen,
        )
