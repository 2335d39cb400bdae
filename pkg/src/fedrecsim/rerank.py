"""Server-side re-rank: diversity (greedy maximal marginal relevance),
freshness and popularity adjustments over the client's Top-T request, plus
the popularity-based cold-start path."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import ConfigurationError, UniquenessError
from .recall import popularity_top_k

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RerankPolicy:
    diversity_lambda: float = 1.0
    freshness_weight: float = 0.0
    popularity_weight: float = 0.0
    output_size: int = 1

    def validate(self) -> list[str]:
        problems = []
        if not 0.0 <= self.diversity_lambda <= 1.0:
            problems.append(
                f"diversity_lambda must be in [0, 1], got {self.diversity_lambda}"
            )
        if not np.isfinite(self.freshness_weight) or self.freshness_weight < 0:
            problems.append(f"freshness_weight must be >= 0, got {self.freshness_weight}")
        if not np.isfinite(self.popularity_weight) or self.popularity_weight < 0:
            problems.append(f"popularity_weight must be >= 0, got {self.popularity_weight}")
        if self.output_size < 1:
            problems.append(f"output_size must be >= 1, got {self.output_size}")
        return problems


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of the angle between feature vectors; zero vectors are defined
    to have similarity 0 with everything."""
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b) / (na * nb)


def mmr_rerank(
    ordered_items,
    item_features: dict,
    diversity_lambda: float,
    output_size: int,
) -> list[int]:
    """Greedy maximal marginal relevance over an already-ranked id list.

    Relevance of the item at 0-based input position p is 1/(p+1). The first
    pick is pure relevance; each later pick maximizes
    lambda*relevance - (1-lambda)*max_similarity_to_picked, ties broken by
    ascending item id.
    """
    ordered_items = [int(i) for i in ordered_items]
    if len(set(ordered_items)) != len(ordered_items):
        raise UniquenessError("re-rank input contains duplicate item ids")
    if not 0.0 <= diversity_lambda <= 1.0:
        raise ConfigurationError(f"lambda must be in [0, 1], got {diversity_lambda}")
    if output_size < 1:
        raise ConfigurationError(f"output_size must be >= 1, got {output_size}")
    if output_size > len(ordered_items):
        log.warning(
            "output_size=%d exceeds %d re-rank inputs; clamping",
            output_size, len(ordered_items),
        )
        output_size = len(ordered_items)
    if not ordered_items:
        return []

    relevance = {iid: 1.0 / (pos + 1) for pos, iid in enumerate(ordered_items)}
    feats = {iid: np.asarray(item_features[iid], dtype=float) for iid in ordered_items}

    remaining = list(ordered_items)
    first = min(remaining, key=lambda i: (-relevance[i], i))
    picked = [first]
    remaining.remove(first)

    while len(picked) < output_size and remaining:
        def objective(iid: int) -> float:
            max_sim = max(cosine_similarity(feats[iid], feats[p]) for p in picked)
            return diversity_lambda * relevance[iid] - (1.0 - diversity_lambda) * max_sim

        best = min(remaining, key=lambda i: (-objective(i), i))
        picked.append(best)
        remaining.remove(best)
    return picked


def _recency_score(current_timestep: int, created_at: int) -> float:
    return 1.0 / (1.0 + max(0, int(current_timestep) - int(created_at)))


def apply_policy(
    top_t_request,
    dataset: Dataset,
    policy: RerankPolicy,
    current_timestep: int,
) -> list[dict]:
    """Final-list payload for a Top-T request.

    Runs MMR over the requested order, then adjusts by freshness and
    normalized popularity with a stable re-sort, and attaches the full item
    content. Never injects items the client did not request.
    """
    problems = policy.validate()
    if problems:
        raise ConfigurationError(problems)
    request = [int(i) for i in top_t_request]
    items = {iid: dataset.item(iid) for iid in request}  # unknown id -> lookup error

    features = {iid: items[iid].feature_vector for iid in request}
    mmr_order = mmr_rerank(request, features, policy.diversity_lambda, len(request))

    max_pop = max((it.popularity_count for it in dataset.catalog), default=0)
    combined = {}
    for pos, iid in enumerate(mmr_order):
        it = items[iid]
        score = 1.0 / (pos + 1)
        score += policy.freshness_weight * _recency_score(current_timestep, it.created_at)
        if max_pop > 0:
            score += policy.popularity_weight * (it.popularity_count / max_pop)
        combined[iid] = score

    reordered = sorted(mmr_order, key=lambda iid: -combined[iid])  # stable
    size = policy.output_size
    if size > len(reordered):
        log.warning("output_size=%d exceeds request size %d; clamping", size, len(reordered))
        size = len(reordered)
    return [
        {
            "item_id": int(iid),
            "features": [float(x) for x in items[iid].feature_vector],
            "created_at": int(items[iid].created_at),
            "popularity": int(items[iid].popularity_count),
        }
        for iid in reordered[:size]
    ]


def cold_start_list(
    user_id: int,
    dataset: Dataset,
    policy: RerankPolicy,
    output_size: int,
    current_timestep: int = 0,
) -> list[dict]:
    """Popularity prefix passed through the policy, for users with no usable
    history or parameters."""
    top = popularity_top_k(dataset, output_size)
    request = [iid for iid, _ in top]
    sized = RerankPolicy(
        diversity_lambda=policy.diversity_lambda,
        freshness_weight=policy.freshness_weight,
        popularity_weight=policy.popularity_weight,
        output_size=min(output_size, len(request)),
    )
    return apply_policy(request, dataset, sized, current_timestep)
