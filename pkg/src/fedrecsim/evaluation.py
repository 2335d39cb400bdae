"""Evaluation harness: leave-last-out split, ranking metrics, baseline
trainers, and the precision-loss verdict.

Four systems are compared on one split: the federated model, the
centralized pooled-data oracle, the per-client local-only baselines, and a
centralized public-only ablation (private features zeroed). The verdict
reports |P_Sum - P_FL| against the configured threshold and the fraction of
clients whose federated performance beats their isolated baseline.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, ItemRecord, PublicUserRecord, featurize, feature_dim
from .errors import (
    ConfigurationError,
    DivergenceError,
    EmptyEvaluationError,
    IncomparableReportsError,
)
from .federation import derive_client_round_seed, init_global
from .numerics import sigmoid
from .ranking import (
    ClientState,
    RankHyper,
    RankingParams,
    build_training_set,
    local_train,
    sgd_epoch_batches,
)
from .recall import POSITIVE_FEEDBACK_THRESHOLD
from .serialize import canonical_json

LOG_LOSS_CLIP = 1e-15


# -- split ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EvalSplit:
    heldout: dict  # user_id -> tuple of held-out positive item ids
    negatives: dict  # user_id -> tuple of sampled negative item ids
    train_dataset: Dataset
    fingerprint: str
    holdout_per_user: int
    negatives_per_positive: int
    seed: int

    @property
    def evaluated_users(self) -> list[int]:
        return sorted(self.heldout)

    def pool(self, user_id: int) -> list[int]:
        return sorted(set(self.heldout[user_id]) | set(self.negatives[user_id]))


def make_split(
    dataset: Dataset,
    holdout_per_user: int,
    negatives_per_positive: int,
    seed: int,
) -> EvalSplit:
    """Hold out each qualifying user's last positive interactions.

    A user qualifies with more than ``holdout_per_user`` positive
    interactions; the last ones by (timestep, item_id) move to the test side
    and every event touching a held-out item is removed from the training
    log (and from popularity counts), so no system under comparison can see
    them. Negatives are seeded draws from never-interacted items.
    """
    if holdout_per_user < 1:
        raise ConfigurationError(f"holdout_per_user must be >= 1, got {holdout_per_user}")
    if negatives_per_positive < 1:
        raise ConfigurationError(
            f"negatives_per_positive must be >= 1, got {negatives_per_positive}"
        )
    rng = np.random.default_rng(seed)
    all_items = np.array(sorted(dataset.item_ids))

    heldout: dict[int, tuple] = {}
    negatives: dict[int, tuple] = {}
    removed_events: dict[int, int] = {}  # item_id -> count removed
    new_store = []
    for user in dataset.public_store:
        events = list(user.interaction_log)
        positives = [ev for ev in events if ev.feedback >= POSITIVE_FEEDBACK_THRESHOLD]
        pos_items = []
        seen_pos = set()
        for ev in sorted(positives, key=lambda e: (e.timestep, e.item_id)):
            if ev.item_id not in seen_pos:
                seen_pos.add(ev.item_id)
                pos_items.append(ev.item_id)
        if len(pos_items) < holdout_per_user + 1:
            new_store.append(user)
            continue
        held = tuple(pos_items[-holdout_per_user:])
        held_set = set(held)
        kept = tuple(ev for ev in events if ev.item_id not in held_set)
        for ev in events:
            if ev.item_id in held_set:
                removed_events[ev.item_id] = removed_events.get(ev.item_id, 0) + 1
        new_store.append(PublicUserRecord(user.user_id, user.public_features, kept))

        interacted = {ev.item_id for ev in events}
        pool = np.array([iid for iid in all_items.tolist() if iid not in interacted])
        want = negatives_per_positive * len(held)
        take = min(want, len(pool))
        drawn = rng.choice(pool, size=take, replace=False) if take else np.array([], dtype=int)
        heldout[user.user_id] = held
        negatives[user.user_id] = tuple(sorted(int(x) for x in drawn))

    if not heldout:
        raise EmptyEvaluationError(
            "no user has enough positive interactions for the requested holdout"
        )

    catalog = tuple(
        ItemRecord(
            it.item_id,
            it.feature_vector,
            max(0, it.popularity_count - removed_events.get(it.item_id, 0)),
            it.created_at,
        )
        for it in dataset.catalog
    )
    train_dataset = Dataset.create(catalog, new_store, dataset.private_shards)

    digest = hashlib.sha256(
        canonical_json(
            {
                "seed": int(seed),
                "holdout_per_user": int(holdout_per_user),
                "negatives_per_positive": int(negatives_per_positive),
                "users": sorted(int(u) for u in heldout),
            }
        )
    ).hexdigest()[:16]
    return EvalSplit(
        heldout=heldout,
        negatives=negatives,
        train_dataset=train_dataset,
        fingerprint=digest,
        holdout_per_user=holdout_per_user,
        negatives_per_positive=negatives_per_positive,
        seed=seed,
    )


# -- ranking metrics -------------------------------------------------------


def precision_at_k(ranked_ids, relevant_ids, k: int) -> float:
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    hits = len(set(ranked_ids[:k]) & set(relevant_ids))
    return hits / k


def recall_at_k(ranked_ids, relevant_ids, k: int) -> float:
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    relevant = set(relevant_ids)
    if not relevant:
        return 0.0
    return len(set(ranked_ids[:k]) & relevant) / len(relevant)


def ndcg_at_k(ranked_ids, relevant_ids, k: int) -> float:
    """Binary-gain NDCG truncated at k; 0 when nothing is relevant."""
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    relevant = set(relevant_ids)
    if not relevant:
        return 0.0
    dcg = sum(
        1.0 / math.log2(pos + 2)
        for pos, iid in enumerate(ranked_ids[:k])
        if iid in relevant
    )
    ideal = sum(1.0 / math.log2(pos + 2) for pos in range(min(k, len(relevant))))
    return dcg / ideal


def log_loss(labels, probabilities) -> float:
    losses = []
    for y, p in zip(labels, probabilities):
        p = min(max(float(p), LOG_LOSS_CLIP), 1.0 - LOG_LOSS_CLIP)
        losses.append(-(y * math.log(p) + (1.0 - y) * math.log(1.0 - p)))
    return float(np.mean(losses))


# -- reports ----------------------------------------------------------------


@dataclass
class MetricsReport:
    system_label: str
    split_fingerprint: str
    k_values: tuple
    primary_k: int
    precision: dict
    recall: dict
    ndcg: dict
    log_loss: float
    n_users_evaluated: int
    n_users_failed: int
    per_user_primary: dict = field(default_factory=dict)

    @property
    def primary_value(self) -> float:
        return self.ndcg[self.primary_k]

    def metric_values(self) -> dict:
        out = {}
        for k in self.k_values:
            out[f"precision@{k}"] = self.precision[k]
            out[f"recall@{k}"] = self.recall[k]
            out[f"ndcg@{k}"] = self.ndcg[k]
        out["log_loss"] = self.log_loss
        return out

    def to_dict(self) -> dict:
        return {
            "system_label": self.system_label,
            "split_fingerprint": self.split_fingerprint,
            "k_values": [int(k) for k in self.k_values],
            "primary_k": int(self.primary_k),
            "precision_at_k": {str(k): self.precision[k] for k in self.k_values},
            "recall_at_k": {str(k): self.recall[k] for k in self.k_values},
            "ndcg_at_k": {str(k): self.ndcg[k] for k in self.k_values},
            "log_loss": self.log_loss,
            "n_users_evaluated": self.n_users_evaluated,
            "n_users_failed": self.n_users_failed,
            "per_user_ndcg_primary": {
                str(u): v for u, v in sorted(self.per_user_primary.items())
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        k_values = tuple(int(k) for k in d["k_values"])
        return cls(
            system_label=d["system_label"],
            split_fingerprint=d["split_fingerprint"],
            k_values=k_values,
            primary_k=int(d["primary_k"]),
            precision={k: d["precision_at_k"][str(k)] for k in k_values},
            recall={k: d["recall_at_k"][str(k)] for k in k_values},
            ndcg={k: d["ndcg_at_k"][str(k)] for k in k_values},
            log_loss=d["log_loss"],
            n_users_evaluated=int(d["n_users_evaluated"]),
            n_users_failed=int(d["n_users_failed"]),
            per_user_primary={
                int(u): v for u, v in d["per_user_ndcg_primary"].items()
            },
        )


def evaluate_system(
    system,
    split: EvalSplit,
    k_values=(1, 5, 10),
    primary_k: int = 10,
    label: str = "system",
    user_ids=None,
) -> MetricsReport:
    """Macro-averaged ranking metrics for one system.

    ``system(user_id, pool_item_ids)`` must return (item_id, probability)
    pairs covering the pool. A user on which the system raises is recorded
    as failed and excluded from the averages.
    """
    if primary_k not in k_values:
        raise ConfigurationError(f"primary_k {primary_k} not in k_values {k_values}")
    users = sorted(user_ids) if user_ids is not None else split.evaluated_users
    per_k_prec = {k: [] for k in k_values}
    per_k_rec = {k: [] for k in k_values}
    per_k_ndcg = {k: [] for k in k_values}
    losses = []
    per_user_primary = {}
    failed = 0
    for uid in users:
        pool = split.pool(uid)
        relevant = set(split.heldout[uid])
        try:
            scored = list(system(uid, pool))
            if {iid for iid, _ in scored} != set(pool):
                raise ConfigurationError(f"system did not score the full pool for user {uid}")
        except Exception:
            failed += 1
            continue
        scored.sort(key=lambda e: (-e[1], e[0]))
        ranked = [iid for iid, _ in scored]
        probs = {iid: p for iid, p in scored}
        for k in k_values:
            per_k_prec[k].append(precision_at_k(ranked, relevant, k))
            per_k_rec[k].append(recall_at_k(ranked, relevant, k))
            per_k_ndcg[k].append(ndcg_at_k(ranked, relevant, k))
        labels = [1.0 if iid in relevant else 0.0 for iid in pool]
        losses.append(log_loss(labels, [probs[iid] for iid in pool]))
        per_user_primary[uid] = ndcg_at_k(ranked, relevant, primary_k)

    n_eval = len(users) - failed
    if n_eval < 1:
        raise EmptyEvaluationError(f"system {label!r} failed on every user")
    return MetricsReport(
        system_label=label,
        split_fingerprint=split.fingerprint,
        k_values=tuple(k_values),
        primary_k=primary_k,
        precision={k: float(np.mean(per_k_prec[k])) for k in k_values},
        recall={k: float(np.mean(per_k_rec[k])) for k in k_values},
        ndcg={k: float(np.mean(per_k_ndcg[k])) for k in k_values},
        log_loss=float(np.mean(losses)),
        n_users_evaluated=n_eval,
        n_users_failed=failed,
        per_user_primary=per_user_primary,
    )


# -- systems -----------------------------------------------------------------


def make_lr_system(params: RankingParams, dataset: Dataset, use_private: bool = True):
    """Ranking function backed by the logistic model.

    With ``use_private`` the scoring runs as it would on the client device
    (private features joined locally); without it, private inputs are zeroed
    as in the centralized public-only world.
    """
    dims = dataset.dims

    def system(user_id: int, pool):
        user = dataset.public_user(user_id)
        pri = dataset.private_shard(user_id).private_features if use_private else None
        X = np.stack(
            [featurize(user.public_features, pri, dataset.item(iid), dims) for iid in pool]
        )
        probs = sigmoid(X @ params.weights)
        return list(zip([int(i) for i in pool], [float(p) for p in probs]))

    return system


def _pooled_sgd(
    X: np.ndarray,
    y: np.ndarray,
    hyper: RankHyper,
    epochs: int,
    init: RankingParams,
    shuffle_seed,
) -> RankingParams:
    weights = init.weights.copy()
    rng = np.random.default_rng(shuffle_seed)
    for _ in range(epochs):
        for idx in sgd_epoch_batches(rng, len(y), hyper.batch_size):
            errs = sigmoid(X[idx] @ weights) - y[idx]
            grad = X[idx].T @ errs / len(idx)
            if hyper.l2_reg:
                reg = hyper.l2_reg * weights
                reg[-1] = 0.0
                grad = grad + reg
            weights = weights - hyper.learning_rate * grad
    if not np.isfinite(weights).all():
        raise DivergenceError("centralized training diverged")
    return RankingParams(weights)


def train_centralized_sum(
    client_states: dict[int, ClientState],
    hyper: RankHyper,
    epochs: int,
    seed: int,
    use_private: bool = True,
) -> RankingParams:
    """The pooled-data oracle: every client's local training set, one trainer.

    Uses the same featurization and the same mini-batch SGD as the clients;
    ``use_private=False`` yields the public-only ablation.
    """
    blocks = []
    labels = []
    dims = None
    for uid in sorted(client_states):
        state = client_states[uid]
        if state.candidates is None or not state.candidates.items:
            continue
        X, y = build_training_set(state, use_private=use_private)
        blocks.append(X)
        labels.append(y)
        dims = state.dims
    if not blocks:
        raise EmptyEvaluationError("no client has candidates to pool")
    X = np.vstack(blocks)
    y = np.concatenate(labels)
    init = init_global(feature_dim(dims), seed)
    return _pooled_sgd(X, y, hyper, epochs, init, [seed, 1])


def train_local_only(
    state: ClientState,
    hyper: RankHyper,
    rounds: int,
    init_seed: int,
    round_seed_base: int,
) -> RankingParams | None:
    """Isolated baseline: local training iterated from a fresh init, no
    aggregation. Mirrors the federated seed schedule so that with N=1 it
    coincides with the federated result."""
    params = init_global(feature_dim(state.dims), init_seed)
    for round_index in range(1, rounds + 1):
        state.rng_seed = derive_client_round_seed(round_seed_base, round_index, state.user_id)
        result = local_train(params, state, hyper)
        if result is None:
            return None
        params, _ = result
    return params


def combine_local_reports(p_locals, label: str = "Local") -> MetricsReport:
    """Aggregate the per-client local baselines into one report (each local
    model is evaluated on its own user, so the macro average over clients is
    the mean of the per-client values)."""
    if not p_locals:
        raise EmptyEvaluationError("no local reports to combine")
    first = p_locals[0]
    per_user = {}
    for rep in p_locals:
        per_user.update(rep.per_user_primary)
    return MetricsReport(
        system_label=label,
        split_fingerprint=first.split_fingerprint,
        k_values=first.k_values,
        primary_k=first.primary_k,
        precision={k: float(np.mean([r.precision[k] for r in p_locals])) for k in first.k_values},
        recall={k: float(np.mean([r.recall[k] for r in p_locals])) for k in first.k_values},
        ndcg={k: float(np.mean([r.ndcg[k] for r in p_locals])) for k in first.k_values},
        log_loss=float(np.mean([r.log_loss for r in p_locals])),
        n_users_evaluated=sum(r.n_users_evaluated for r in p_locals),
        n_users_failed=sum(r.n_users_failed for r in p_locals),
        per_user_primary=per_user,
    )


# -- verdict -------------------------------------------------------------------


@dataclass
class VerdictReport:
    delta_threshold: float
    primary_metric: str
    sum_primary: float
    fl_primary: float
    gap_primary: float
    delta_pass: bool
    gaps: dict
    mean_local_primary: float
    fl_exceeds_mean_local: bool
    validity_fraction: float
    n_local_clients: int
    split_fingerprint: str

    def to_dict(self) -> dict:
        return {
            "delta_threshold": self.delta_threshold,
            "primary_metric": self.primary_metric,
            "sum_primary": self.sum_primary,
            "fl_primary": self.fl_primary,
            "gap_primary": self.gap_primary,
            "delta_pass": self.delta_pass,
            "gaps": dict(sorted(self.gaps.items())),
            "mean_local_primary": self.mean_local_primary,
            "fl_exceeds_mean_local": self.fl_exceeds_mean_local,
            "validity_fraction": self.validity_fraction,
            "n_local_clients": self.n_local_clients,
            "split_fingerprint": self.split_fingerprint,
        }


def delta_precision_report(
    p_sum: MetricsReport,
    p_fl: MetricsReport,
    p_locals,
    delta_threshold: float,
) -> VerdictReport:
    """Per-metric |P_Sum - P_FL| with a pass/fail against the threshold on
    the primary metric, plus the fraction of clients whose federated
    performance strictly beats their isolated baseline."""
    reports = [p_sum, p_fl, *p_locals]
    fingerprints = {r.split_fingerprint for r in reports}
    if len(fingerprints) != 1:
        raise IncomparableReportsError(
            f"reports computed on different splits: {sorted(fingerprints)}"
        )
    if p_sum.primary_k != p_fl.primary_k or p_sum.k_values != p_fl.k_values:
        raise IncomparableReportsError("reports use different metric settings")

    gaps = {
        name: abs(p_sum.metric_values()[name] - p_fl.metric_values()[name])
        for name in p_sum.metric_values()
    }
    primary_metric = f"ndcg@{p_fl.primary_k}"
    gap_primary = gaps[primary_metric]

    local_values = []
    wins = 0
    comparable = 0
    for rep in p_locals:
        local_values.append(rep.primary_value)
        for uid, local_val in rep.per_user_primary.items():
            if uid in p_fl.per_user_primary:
                comparable += 1
                if p_fl.per_user_primary[uid] > local_val:
                    wins += 1
    mean_local = float(np.mean(local_values)) if local_values else float("nan")
    return VerdictReport(
        delta_threshold=float(delta_threshold),
        primary_metric=primary_metric,
        sum_primary=p_sum.primary_value,
        fl_primary=p_fl.primary_value,
        gap_primary=gap_primary,
        delta_pass=gap_primary < delta_threshold,
        gaps=gaps,
        mean_local_primary=mean_local,
        fl_exceeds_mean_local=bool(local_values) and p_fl.primary_value > mean_local,
        validity_fraction=(wins / comparable) if comparable else float("nan"),
        n_local_clients=len(local_values),
        split_fingerprint=p_fl.split_fingerprint,
    )
