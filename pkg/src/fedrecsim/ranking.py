"""Per-client ranking: local logistic-regression training and inference.

Each client joins its recalled candidates with its private features, trains
locally by mini-batch SGD from the global parameters, and sends back only
the updated parameter vector (plus sample count) or a Top-T id list.
Everything here is a pure function of client-local state, so clients can be
simulated in parallel.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import Interaction, PrivateShard, featurize, feature_dim
from .errors import (
    ConfigurationError,
    DivergenceError,
    EmptyBatchError,
    ShapeError,
)
from .numerics import sigmoid
from .recall import POSITIVE_FEEDBACK_THRESHOLD, CandidateSet

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class RankingParams:
    """Flat parameter vector of the ranking model; bias is the last entry."""

    weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))

    @property
    def dim(self) -> int:
        return len(self.weights)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.weights).all())

    def to_list(self) -> list[float]:
        return [float(x) for x in self.weights]


@dataclass(frozen=True)
class RankHyper:
    local_epochs: int = 1
    batch_size: int = 10
    learning_rate: float = 0.3
    l2_reg: float = 1e-4

    def validate(self) -> list[str]:
        problems = []
        if self.local_epochs < 1:
            problems.append(f"local_epochs must be >= 1, got {self.local_epochs}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            problems.append(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.l2_reg < 0:
            problems.append(f"l2_reg must be >= 0, got {self.l2_reg}")
        return problems


@dataclass
class ClientState:
    """Everything one simulated client device holds.

    Confined to a single client; the federation coordinator is the only
    writer between rounds.
    """

    user_id: int
    private_shard: PrivateShard
    public_features: np.ndarray
    own_interactions: tuple[Interaction, ...]
    dims: tuple[int, int, int]
    candidates: CandidateSet | None = None
    candidate_features: dict[int, np.ndarray] = field(default_factory=dict)
    local_params: RankingParams | None = None
    rng_seed: int = 0
    _xy_cache: dict = field(default_factory=dict, repr=False)

    def receive_candidates(self, candidates: CandidateSet, features_by_id: dict) -> None:
        missing = [iid for iid in candidates.item_ids if iid not in features_by_id]
        if missing:
            raise ShapeError(f"candidate features missing for items {missing}")
        self.candidates = candidates
        self.candidate_features = {
            iid: np.asarray(features_by_id[iid], dtype=float) for iid in candidates.item_ids
        }
        self._xy_cache.clear()

    def positive_item_ids(self) -> set[int]:
        return {
            ev.item_id
            for ev in self.own_interactions
            if ev.feedback >= POSITIVE_FEEDBACK_THRESHOLD
        }


def build_client_states(dataset, candidate_sets=None) -> dict[int, "ClientState"]:
    """One ClientState per user; each holds only its own shard and log."""
    states = {}
    for user in dataset.public_store:
        state = ClientState(
            user_id=user.user_id,
            private_shard=dataset.private_shard(user.user_id),
            public_features=user.public_features,
            own_interactions=user.interaction_log,
            dims=dataset.dims,
        )
        if candidate_sets and user.user_id in candidate_sets:
            cand = candidate_sets[user.user_id]
            feats = {iid: dataset.item(iid).feature_vector for iid in cand.item_ids}
            state.receive_candidates(cand, feats)
        states[user.user_id] = state
    return states


@dataclass(frozen=True)
class RankedList:
    user_id: int
    entries: tuple  # ((item_id, probability), ...) non-increasing

    @property
    def item_ids(self) -> list[int]:
        return [iid for iid, _ in self.entries]


# -- model ------------------------------------------------------------------


def predict(params: RankingParams, x: np.ndarray) -> float:
    """Relevance probability sigmoid(theta . x)."""
    x = np.asarray(x, dtype=float)
    if x.shape != (params.dim,):
        raise ShapeError(f"feature shape {x.shape} != ({params.dim},)")
    return float(sigmoid(float(params.weights @ x)))


def _gradient_xy(weights: np.ndarray, X: np.ndarray, y: np.ndarray, l2_reg: float) -> np.ndarray:
    errs = sigmoid(X @ weights) - y
    grad = X.T @ errs / len(y)
    if l2_reg:
        reg = l2_reg * weights
        reg[-1] = 0.0  # bias coordinate is not regularized
        grad = grad + reg
    return grad


def local_gradient(params: RankingParams, batch, l2_reg: float = 0.0) -> np.ndarray:
    """Mean log-loss gradient over a batch of (feature_vector, label) pairs."""
    batch = list(batch)
    if not batch:
        raise EmptyBatchError("gradient of an empty batch")
    X = np.stack([np.asarray(x, dtype=float) for x, _ in batch])
    y = np.array([float(label) for _, label in batch])
    if X.shape[1] != params.dim:
        raise ShapeError(f"batch feature dim {X.shape[1]} != {params.dim}")
    return _gradient_xy(params.weights, X, y, l2_reg)


def build_training_set(state: ClientState, use_private: bool = True):
    """Design matrix and labels over the client's candidate set.

    Label 1 where the candidate appears in the client's own positive
    interactions, else 0. Cached per (state, use_private); candidates are
    immutable once received.
    """
    key = bool(use_private)
    if key in state._xy_cache:
        return state._xy_cache[key]
    if state.candidates is None or not state.candidates.items:
        raise ConfigurationError(f"client {state.user_id} has no candidates")
    positives = state.positive_item_ids()
    pri = state.private_shard.private_features if use_private else None
    rows = []
    labels = []
    for iid in state.candidates.item_ids:
        rows.append(
            featurize(state.public_features, pri, state.candidate_features[iid], state.dims)
        )
        labels.append(1.0 if iid in positives else 0.0)
    X = np.stack(rows)
    y = np.array(labels)
    state._xy_cache[key] = (X, y)
    return X, y


def sgd_epoch_batches(rng: np.random.Generator, n: int, batch_size: int):
    """Seeded shuffle then consecutive slices; the reference trace uses the
    same scheme."""
    perm = rng.permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def local_train(global_params: RankingParams, state: ClientState, hyper: RankHyper):
    """One client's local training pass. Returns (params, sample_count), or
    None when the client has no candidates (skip-round signal)."""
    problems = hyper.validate()
    if problems:
        raise ConfigurationError(problems)
    if state.candidates is None or not state.candidates.items:
        return None
    if global_params.dim != feature_dim(state.dims):
        raise ShapeError(
            f"global params dim {global_params.dim} != {feature_dim(state.dims)}"
        )
    X, y = build_training_set(state)
    weights = global_params.weights.copy()
    rng = np.random.default_rng(state.rng_seed)
    n = len(y)
    for _ in range(hyper.local_epochs):
        for idx in sgd_epoch_batches(rng, n, hyper.batch_size):
            grad = _gradient_xy(weights, X[idx], y[idx], hyper.l2_reg)
            weights = weights - hyper.learning_rate * grad
    if not np.isfinite(weights).all():
        raise DivergenceError(f"client {state.user_id} local training diverged")
    return RankingParams(weights), n


def local_rank(params: RankingParams, state: ClientState) -> RankedList:
    """Fine-sorted candidate list, computed entirely on client state."""
    if state.candidates is None or not state.candidates.items:
        raise ConfigurationError(f"client {state.user_id} has no candidates")
    entries = []
    for iid in state.candidates.item_ids:
        x = featurize(
            state.public_features,
            state.private_shard.private_features,
            state.candidate_features[iid],
            state.dims,
        )
        entries.append((iid, predict(params, x)))
    entries.sort(key=lambda e: (-e[1], e[0]))
    return RankedList(state.user_id, tuple(entries))


def select_top_t(ranked: RankedList, t: int) -> list[int]:
    """Item ids of the first T entries; probabilities and features stripped."""
    if t <= 1:
        raise ConfigurationError(f"T must be > 1, got {t}")
    n = len(ranked.entries)
    if t >= n:
        clamped = max(1, n - 1)
        log.warning(
            "T=%d >= %d ranked entries for user %d; clamping to %d",
            t, n, ranked.user_id, clamped,
        )
        t = clamped
    return [iid for iid, _ in ranked.entries[:t]]
