"""Dataset schema, public/private partition, CSV ingestion and synthesis.

User data is split into a server-visible public store (disclosed features
plus the interaction log) and per-client private shards. Private shards are
never reachable from server-side state; every shard carries a tamper-evident
marker so serialized leaks can be detected by the privacy audit.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    CoverageError,
    LookupError_,
    ParseError,
    ShapeError,
    UniquenessError,
)
from .serialize import fmt_float

PRIVATE_MARKER_PREFIX = "PRIVATE-SCOPED:"

# Synthetic ground-truth mixing weights. Labels depend on a shared taste
# direction, a public-feature tilt, a private-feature tilt, and a
# private-feature-driven per-user propensity offset, so private data carries
# real signal that a public-only trainer cannot absorb.
GLOBAL_TASTE_WEIGHT = 1.0
PUBLIC_TASTE_WEIGHT = 0.8
PRIVATE_TASTE_WEIGHT = 1.2
PRIVATE_OFFSET_WEIGHT = 2.0


class Interaction(NamedTuple):
    item_id: int
    feedback: float
    timestep: int


@dataclass(frozen=True, eq=False)
class ItemRecord:
    item_id: int
    feature_vector: np.ndarray
    popularity_count: int
    created_at: int

    def to_dict(self) -> dict:
        return {
            "item_id": int(self.item_id),
            "created_at": int(self.created_at),
            "popularity": int(self.popularity_count),
            "features": [float(x) for x in self.feature_vector],
        }


@dataclass(frozen=True, eq=False)
class PublicUserRecord:
    user_id: int
    public_features: np.ndarray
    interaction_log: tuple[Interaction, ...]

    def to_dict(self) -> dict:
        return {
            "user_id": int(self.user_id),
            "features": [float(x) for x in self.public_features],
            "log": [[int(i), float(f), int(t)] for i, f, t in self.interaction_log],
        }


def _shard_marker(user_id: int, values: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(str(int(user_id)).encode("ascii"))
    for v in values:
        h.update(repr(float(v)).encode("ascii"))
    return PRIVATE_MARKER_PREFIX + h.hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class PrivateShard:
    """Client-only private features. Never stored in any server-side object."""

    user_id: int
    private_features: np.ndarray
    marker: str

    @classmethod
    def create(cls, user_id: int, private_features: np.ndarray) -> "PrivateShard":
        values = np.asarray(private_features, dtype=float)
        return cls(int(user_id), values, _shard_marker(user_id, values))

    def verify_marker(self) -> bool:
        return self.marker == _shard_marker(self.user_id, self.private_features)

    def to_dict(self) -> dict:
        return {
            "user_id": int(self.user_id),
            "features": [float(x) for x in self.private_features],
            "marker": self.marker,
        }


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable catalog + public store + private shards.

    ``record_interaction`` produces a new logical version; existing readers
    never observe mutation.
    """

    catalog: tuple[ItemRecord, ...]
    public_store: tuple[PublicUserRecord, ...]
    private_shards: tuple[PrivateShard, ...]
    dims: tuple[int, int, int]  # (d_item, d_pub, d_pri)

    _items_by_id: dict = field(init=False, repr=False, default=None)
    _users_by_id: dict = field(init=False, repr=False, default=None)
    _shards_by_id: dict = field(init=False, repr=False, default=None)

    def __post_init__(self):
        object.__setattr__(self, "_items_by_id", {it.item_id: it for it in self.catalog})
        object.__setattr__(self, "_users_by_id", {u.user_id: u for u in self.public_store})
        object.__setattr__(self, "_shards_by_id", {s.user_id: s for s in self.private_shards})

    @classmethod
    def create(
        cls,
        catalog: Sequence[ItemRecord],
        public_store: Sequence[PublicUserRecord],
        private_shards: Sequence[PrivateShard],
    ) -> "Dataset":
        catalog = tuple(catalog)
        public_store = tuple(public_store)
        private_shards = tuple(private_shards)
        if not catalog:
            raise ConfigurationError("catalog must contain at least one item")
        if not public_store:
            raise ConfigurationError("public store must contain at least one user")

        item_ids = [it.item_id for it in catalog]
        if len(set(item_ids)) != len(item_ids):
            dup = _first_duplicate(item_ids)
            raise UniquenessError(f"duplicate item_id {dup} in catalog")
        user_ids = [u.user_id for u in public_store]
        if len(set(user_ids)) != len(user_ids):
            dup = _first_duplicate(user_ids)
            raise UniquenessError(f"duplicate user_id {dup} in public store")
        shard_ids = [s.user_id for s in private_shards]
        if len(set(shard_ids)) != len(shard_ids):
            dup = _first_duplicate(shard_ids)
            raise UniquenessError(f"duplicate user_id {dup} in private shards")
        if set(user_ids) != set(shard_ids):
            missing_priv = sorted(set(user_ids) - set(shard_ids))
            missing_pub = sorted(set(shard_ids) - set(user_ids))
            raise CoverageError(
                "public and private user sets differ: "
                f"missing private shards for {missing_priv}, "
                f"missing public records for {missing_pub}"
            )

        d_item = len(catalog[0].feature_vector)
        d_pub = len(public_store[0].public_features)
        d_pri = len(private_shards[0].private_features)
        for it in catalog:
            if len(it.feature_vector) != d_item:
                raise ShapeError(
                    f"item {it.item_id}: feature length {len(it.feature_vector)} != {d_item}"
                )
            if it.popularity_count < 0:
                raise ConfigurationError(f"item {it.item_id}: negative popularity")
        for u in public_store:
            if len(u.public_features) != d_pub:
                raise ShapeError(
                    f"user {u.user_id}: public feature length {len(u.public_features)} != {d_pub}"
                )
            last_t = None
            for it_id, fb, t in u.interaction_log:
                if it_id not in {i.item_id for i in catalog}:
                    raise LookupError_(f"user {u.user_id}: interaction with unknown item {it_id}")
                if not 0.0 <= fb <= 1.0:
                    raise ConfigurationError(
                        f"user {u.user_id}: feedback {fb} outside [0, 1]"
                    )
                if last_t is not None and t < last_t:
                    raise ConfigurationError(
                        f"user {u.user_id}: interaction log not sorted by timestep"
                    )
                last_t = t
        for s in private_shards:
            if len(s.private_features) != d_pri:
                raise ShapeError(
                    f"user {s.user_id}: private feature length {len(s.private_features)} != {d_pri}"
                )

        return cls(catalog, public_store, private_shards, (d_item, d_pub, d_pri))

    # -- lookups ---------------------------------------------------------

    @property
    def n_items(self) -> int:
        return len(self.catalog)

    @property
    def n_users(self) -> int:
        return len(self.public_store)

    @property
    def user_ids(self) -> list[int]:
        return [u.user_id for u in self.public_store]

    @property
    def item_ids(self) -> list[int]:
        return [it.item_id for it in self.catalog]

    def item(self, item_id: int) -> ItemRecord:
        try:
            return self._items_by_id[item_id]
        except KeyError:
            raise LookupError_(f"unknown item id {item_id}") from None

    def public_user(self, user_id: int) -> PublicUserRecord:
        try:
            return self._users_by_id[user_id]
        except KeyError:
            raise LookupError_(f"unknown user id {user_id}") from None

    def private_shard(self, user_id: int) -> PrivateShard:
        """Client-side accessor: only the owning client may hold the result."""
        try:
            return self._shards_by_id[user_id]
        except KeyError:
            raise LookupError_(f"unknown user id {user_id}") from None

    def interacted_items(self, user_id: int) -> set[int]:
        return {ev.item_id for ev in self.public_user(user_id).interaction_log}

    def positive_items(self, user_id: int, threshold: float = 0.5) -> set[int]:
        return {
            ev.item_id
            for ev in self.public_user(user_id).interaction_log
            if ev.feedback >= threshold
        }

    def server_view_dict(self) -> dict:
        """Everything the server may hold, in serializable form. Excludes
        private shards by construction."""
        return {
            "catalog": [it.to_dict() for it in self.catalog],
            "public_store": [u.to_dict() for u in self.public_store],
        }

    def private_feature_values(self) -> list[float]:
        """All private feature values, for the audit's exact-match scan."""
        out: list[float] = []
        for s in self.private_shards:
            out.extend(float(x) for x in s.private_features)
        return out


def _first_duplicate(ids):
    seen = set()
    for x in ids:
        if x in seen:
            return x
        seen.add(x)
    return None


# -- recording (Service layer) ------------------------------------------


def record_interaction(
    dataset: Dataset, user_id: int, item_id: int, feedback_value: float, timestep: int
) -> Dataset:
    """Append one interaction to the user's public log and bump the item's
    popularity. Copy-on-write: returns a new Dataset, never mutates."""
    user = dataset.public_user(user_id)
    item = dataset.item(item_id)
    if not 0.0 <= feedback_value <= 1.0:
        raise ConfigurationError(f"feedback {feedback_value} outside [0, 1]")
    if user.interaction_log and timestep < user.interaction_log[-1].timestep:
        raise ConfigurationError(
            f"timestep {timestep} precedes last logged timestep "
            f"{user.interaction_log[-1].timestep} for user {user_id}"
        )
    new_user = PublicUserRecord(
        user.user_id,
        user.public_features,
        user.interaction_log + (Interaction(int(item_id), float(feedback_value), int(timestep)),),
    )
    new_item = ItemRecord(
        item.item_id, item.feature_vector, item.popularity_count + 1, item.created_at
    )
    catalog = tuple(new_item if it.item_id == item_id else it for it in dataset.catalog)
    store = tuple(new_user if u.user_id == user_id else u for u in dataset.public_store)
    return Dataset(catalog, store, dataset.private_shards, dataset.dims)


# -- featurization -------------------------------------------------------


def featurize(
    public_features: np.ndarray,
    private_features: np.ndarray | None,
    item,
    dims: tuple[int, int, int],
) -> np.ndarray:
    """Ranking-model input: [public || private || item features || 1.0 bias].

    ``private_features=None`` (the centralized public-only baseline)
    substitutes zeros of length d_pri so parameter dimensions agree across
    all model variants. ``item`` may be an ItemRecord or a raw vector.
    """
    d_item, d_pub, d_pri = dims
    pub = np.asarray(public_features, dtype=float)
    item_vec = np.asarray(
        item.feature_vector if hasattr(item, "feature_vector") else item, dtype=float
    )
    if pub.shape != (d_pub,):
        raise ShapeError(f"public features shape {pub.shape} != ({d_pub},)")
    if item_vec.shape != (d_item,):
        raise ShapeError(f"item features shape {item_vec.shape} != ({d_item},)")
    if private_features is None:
        pri = np.zeros(d_pri)
    else:
        pri = np.asarray(private_features, dtype=float)
        if pri.shape != (d_pri,):
            raise ShapeError(f"private features shape {pri.shape} != ({d_pri},)")
    return np.concatenate([pub, pri, item_vec, [1.0]])


def feature_dim(dims: tuple[int, int, int]) -> int:
    d_item, d_pub, d_pri = dims
    return d_pub + d_pri + d_item + 1


# -- synthetic generation -------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    n_users: int  # N
    n_items: int  # M
    d_item: int
    d_pub: int
    d_pri: int
    interactions_per_user: int
    preference_noise: float = 0.0

    def validate(self) -> list[str]:
        problems = []
        if self.n_users < 2:
            problems.append(f"n_users must be >= 2, got {self.n_users}")
        if self.n_items < 2:
            problems.append(f"n_items must be >= 2, got {self.n_items}")
        for name in ("d_item", "d_pub", "d_pri"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 1 <= self.interactions_per_user <= self.n_items:
            problems.append(
                "interactions_per_user must be in [1, n_items], "
                f"got {self.interactions_per_user}"
            )
        if self.preference_noise < 0:
            problems.append(f"preference_noise must be >= 0, got {self.preference_noise}")
        return problems


def generate_synthetic(config: SynthConfig, seed: int) -> Dataset:
    """Deterministic synthetic dataset.

    Ground-truth preference for user u and item j:

        s(u, j) = w_u . f_j + offset_u + noise
        w_u     = g0*g + gp*(pub_u A) + gq*(pri_u B)
        offset_u = go * (pri_u . b)

    Each user interacts with a fixed-size random item set; feedback is 1
    where the noisy score clears the global median of all sampled scores,
    else 0 (a monotone step, so with zero noise label order follows score
    order within a user).
    """
    problems = config.validate()
    if problems:
        raise ConfigurationError(problems)

    rng = np.random.default_rng(seed)
    n, m = config.n_users, config.n_items
    item_feats = rng.normal(size=(m, config.d_item)) / math.sqrt(config.d_item)
    pub = rng.normal(size=(n, config.d_pub))
    pri = rng.normal(size=(n, config.d_pri))
    shared_taste = rng.normal(size=config.d_item)
    pub_mix = rng.normal(size=(config.d_pub, config.d_item)) / math.sqrt(config.d_pub)
    pri_mix = rng.normal(size=(config.d_pri, config.d_item)) / math.sqrt(config.d_pri)
    offset_dir = rng.normal(size=config.d_pri) / math.sqrt(config.d_pri)

    user_dirs = (
        GLOBAL_TASTE_WEIGHT * shared_taste
        + PUBLIC_TASTE_WEIGHT * (pub @ pub_mix)
        + PRIVATE_TASTE_WEIGHT * (pri @ pri_mix)
    )
    offsets = PRIVATE_OFFSET_WEIGHT * (pri @ offset_dir)
    true_scores = user_dirs @ item_feats.T + offsets[:, None]

    created_at = rng.integers(0, max(1, config.interactions_per_user), size=m)

    chosen = np.empty((n, config.interactions_per_user), dtype=int)
    for u in range(n):
        chosen[u] = rng.choice(m, size=config.interactions_per_user, replace=False)
    noise = rng.normal(scale=config.preference_noise, size=chosen.shape) if config.preference_noise > 0 else np.zeros(chosen.shape)

    sampled = np.take_along_axis(true_scores, chosen, axis=1) + noise
    threshold = float(np.median(sampled))
    labels = (sampled >= threshold).astype(float)

    popularity = np.zeros(m, dtype=int)
    np.add.at(popularity, chosen.reshape(-1), 1)

    catalog = tuple(
        ItemRecord(j, item_feats[j].copy(), int(popularity[j]), int(created_at[j]))
        for j in range(m)
    )
    public_store = []
    shards = []
    for u in range(n):
        log = tuple(
            Interaction(int(chosen[u, t]), float(labels[u, t]), t)
            for t in range(config.interactions_per_user)
        )
        public_store.append(PublicUserRecord(u, pub[u].copy(), log))
        shards.append(PrivateShard.create(u, pri[u].copy()))
    return Dataset.create(catalog, public_store, shards)


# -- CSV ingestion ---------------------------------------------------------


def _read_rows(path: Path) -> tuple[list[str], list[tuple[int, list[str]]]]:
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            rows = list(reader)
    except OSError as exc:
        raise ParseError(path, 0, "-", f"cannot read file: {exc}") from exc
    if not rows:
        raise ParseError(path, 1, "-", "empty file (missing header)")
    header = [c.strip() for c in rows[0]]
    body = [(i + 2, row) for i, row in enumerate(rows[1:]) if row]
    return header, body


def _expect_header(path: Path, header: list[str], fixed: list[str], series_prefix: str) -> int:
    """Validate `fixed + prefix0..prefixD-1` headers; return D."""
    if header[: len(fixed)] != fixed:
        raise ParseError(path, 1, header[0] if header else "-",
                         f"expected header to start with {','.join(fixed)}")
    series = header[len(fixed):]
    if not series:
        raise ParseError(path, 1, "-", f"no {series_prefix}* feature columns found")
    for i, name in enumerate(series):
        if name != f"{series_prefix}{i}":
            raise ParseError(path, 1, name, f"expected column {series_prefix}{i}")
    return len(series)


def _parse_float(path: Path, line: int, column: str, raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ParseError(path, line, column, f"not a number: {raw!r}") from None


def _parse_int(path: Path, line: int, column: str, raw: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ParseError(path, line, column, f"not an integer: {raw!r}") from None


def _check_width(path: Path, line: int, row: list[str], header: list[str]) -> None:
    if len(row) != len(header):
        col = header[min(len(row), len(header) - 1)] if len(row) < len(header) else f"column {len(header) + 1}"
        raise ParseError(
            path, line, col,
            f"expected {len(header)} fields, got {len(row)}",
        )


def default_interactions_path(public_path) -> Path:
    p = Path(public_path)
    return p.with_name(p.stem + "_interactions" + p.suffix)


def load_dataset(
    catalog_path,
    public_path,
    private_path,
    interactions_path=None,
) -> Dataset:
    """Load a dataset from the four CSV files.

    ``interactions_path`` defaults to ``<public stem>_interactions<suffix>``
    next to the public file. Private rows are routed exclusively into
    PrivateShard values; no aggregate server structure retains them.
    """
    catalog_path = Path(catalog_path)
    public_path = Path(public_path)
    private_path = Path(private_path)
    if interactions_path is None:
        interactions_path = default_interactions_path(public_path)
    interactions_path = Path(interactions_path)

    # catalog
    header, body = _read_rows(catalog_path)
    d_item = _expect_header(catalog_path, header, ["item_id", "created_at", "popularity"], "f")
    items: list[ItemRecord] = []
    seen_items: set[int] = set()
    for line, row in body:
        _check_width(catalog_path, line, row, header)
        item_id = _parse_int(catalog_path, line, "item_id", row[0])
        if item_id in seen_items:
            raise UniquenessError(f"{catalog_path}:{line}: duplicate item_id {item_id}")
        seen_items.add(item_id)
        created = _parse_int(catalog_path, line, "created_at", row[1])
        pop = _parse_int(catalog_path, line, "popularity", row[2])
        feats = np.array(
            [_parse_float(catalog_path, line, f"f{i}", row[3 + i]) for i in range(d_item)]
        )
        items.append(ItemRecord(item_id, feats, pop, created))

    # public users
    header, body = _read_rows(public_path)
    d_pub = _expect_header(public_path, header, ["user_id"], "p")
    pub_feats: dict[int, np.ndarray] = {}
    for line, row in body:
        _check_width(public_path, line, row, header)
        user_id = _parse_int(public_path, line, "user_id", row[0])
        if user_id in pub_feats:
            raise UniquenessError(f"{public_path}:{line}: duplicate user_id {user_id}")
        pub_feats[user_id] = np.array(
            [_parse_float(public_path, line, f"p{i}", row[1 + i]) for i in range(d_pub)]
        )

    # interactions
    header, body = _read_rows(interactions_path)
    if header != ["user_id", "item_id", "feedback", "timestep"]:
        raise ParseError(interactions_path, 1, "-",
                         "expected header user_id,item_id,feedback,timestep")
    logs: dict[int, list[Interaction]] = {uid: [] for uid in pub_feats}
    for line, row in body:
        _check_width(interactions_path, line, row, header)
        uid = _parse_int(interactions_path, line, "user_id", row[0])
        iid = _parse_int(interactions_path, line, "item_id", row[1])
        fb = _parse_float(interactions_path, line, "feedback", row[2])
        ts = _parse_int(interactions_path, line, "timestep", row[3])
        if uid not in logs:
            raise ParseError(interactions_path, line, "user_id", f"unknown user {uid}")
        if iid not in seen_items:
            raise ParseError(interactions_path, line, "item_id", f"unknown item {iid}")
        if not 0.0 <= fb <= 1.0:
            raise ParseError(interactions_path, line, "feedback",
                             f"feedback {fb} outside [0, 1]")
        logs[uid].append(Interaction(iid, fb, ts))
    for uid in logs:
        logs[uid].sort(key=lambda ev: ev.timestep)

    # private shards
    header, body = _read_rows(private_path)
    d_pri = _expect_header(private_path, header, ["user_id"], "q")
    shards: list[PrivateShard] = []
    seen_priv: set[int] = set()
    for line, row in body:
        _check_width(private_path, line, row, header)
        user_id = _parse_int(private_path, line, "user_id", row[0])
        if user_id in seen_priv:
            raise UniquenessError(f"{private_path}:{line}: duplicate user_id {user_id}")
        seen_priv.add(user_id)
        feats = np.array(
            [_parse_float(private_path, line, f"q{i}", row[1 + i]) for i in range(d_pri)]
        )
        shards.append(PrivateShard.create(user_id, feats))

    public_store = [
        PublicUserRecord(uid, pub_feats[uid], tuple(logs[uid])) for uid in sorted(pub_feats)
    ]
    shards.sort(key=lambda s: s.user_id)
    return Dataset.create(items, public_store, shards)


# -- CSV export (used by the `synth` subcommand) ---------------------------


def write_dataset_csv(dataset: Dataset, outdir) -> dict[str, Path]:
    """Write the four-file CSV form of a dataset. Returns the paths."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    d_item, d_pub, d_pri = dataset.dims

    catalog_path = outdir / "catalog.csv"
    with open(catalog_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["item_id", "created_at", "popularity"] + [f"f{i}" for i in range(d_item)])
        for it in dataset.catalog:
            w.writerow(
                [it.item_id, it.created_at, it.popularity_count]
                + [fmt_float(x) for x in it.feature_vector]
            )

    public_path = outdir / "users_public.csv"
    with open(public_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id"] + [f"p{i}" for i in range(d_pub)])
        for u in dataset.public_store:
            w.writerow([u.user_id] + [fmt_float(x) for x in u.public_features])

    interactions_path = default_interactions_path(public_path)
    with open(interactions_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id", "item_id", "feedback", "timestep"])
        for u in dataset.public_store:
            for iid, fb, ts in u.interaction_log:
                w.writerow([u.user_id, iid, fmt_float(fb), ts])

    private_path = outdir / "users_private.csv"
    with open(private_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id"] + [f"q{i}" for i in range(d_pri)])
        for s in dataset.private_shards:
            w.writerow([s.user_id] + [fmt_float(x) for x in s.private_features])

    return {
        "catalog": catalog_path,
        "public": public_path,
        "interactions": interactions_path,
        "private": private_path,
    }
