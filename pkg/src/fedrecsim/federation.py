"""Centralized cross-device federation loop.

The coordinator owns the global ranking parameters, samples clients each
round, fans out parameter pushes, collects uploaded updates, and merges them
by sample-count-weighted averaging. Every payload that crosses the
server/client boundary is a Message with a canonical byte form; the privacy
auditor checks each one for private-scoped content before it is archived.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset
from .errors import (
    ConfigurationError,
    NoParticipantsError,
    PrivacyViolationError,
    RejectedUpdateError,
    ShapeError,
)
from .ranking import ClientState, RankHyper, RankingParams, local_train
from .serialize import canonical_json, nine_sig, scan_float_tokens

CANDIDATE_PUSH = "CandidatePush"
GLOBAL_PARAMS_PUSH = "GlobalParamsPush"
LOCAL_UPDATE_UPLOAD = "LocalUpdateUpload"
TOP_T_REQUEST = "TopTRequest"
FINAL_LIST_PUSH = "FinalListPush"

DOWNSTREAM_KINDS = frozenset({CANDIDATE_PUSH, GLOBAL_PARAMS_PUSH, FINAL_LIST_PUSH})
UPSTREAM_KINDS = frozenset({LOCAL_UPDATE_UPLOAD, TOP_T_REQUEST})

SERVER = "server"


def client_entity(user_id: int) -> str:
    return f"client:{int(user_id)}"


# -- messages ---------------------------------------------------------------


@dataclass(frozen=True)
class Message:
    kind: str
    sender: str
    receiver: str
    payload: dict
    byte_size: int

    @classmethod
    def create(cls, kind: str, sender: str, receiver: str, payload: dict) -> "Message":
        size = len(canonical_json({"kind": kind, "sender": sender,
                                   "receiver": receiver, "payload": payload}))
        return cls(kind, sender, receiver, payload, size)

    def canonical_bytes(self) -> bytes:
        return canonical_json({"kind": self.kind, "sender": self.sender,
                               "receiver": self.receiver, "payload": self.payload})


def make_candidate_push(user_id: int, candidates, features_by_id: dict) -> Message:
    payload = {
        "user_id": int(user_id),
        "items": [
            {
                "item_id": int(iid),
                "score": float(score),
                "features": [float(x) for x in features_by_id[iid]],
            }
            for iid, score in candidates.items
        ],
    }
    return Message.create(CANDIDATE_PUSH, SERVER, client_entity(user_id), payload)


def make_full_catalog_push(user_id: int, dataset: Dataset) -> Message:
    """The recall-disabled baseline: pushing the entire catalog to a client.
    Exists for communication accounting, not for the training path."""
    payload = {
        "user_id": int(user_id),
        "items": [
            {
                "item_id": int(it.item_id),
                "score": 0.0,
                "features": [float(x) for x in it.feature_vector],
            }
            for it in dataset.catalog
        ],
    }
    return Message.create(CANDIDATE_PUSH, SERVER, client_entity(user_id), payload)


def make_params_push(round_index: int, params: RankingParams, user_id: int) -> Message:
    payload = {"round": int(round_index), "weights": params.to_list()}
    return Message.create(GLOBAL_PARAMS_PUSH, SERVER, client_entity(user_id), payload)


def make_update_upload(user_id: int, params: RankingParams, sample_count: int) -> Message:
    # Exactly (theta_i, sample_count); nothing else may ride along.
    payload = {"weights": params.to_list(), "sample_count": int(sample_count)}
    return Message.create(LOCAL_UPDATE_UPLOAD, client_entity(user_id), SERVER, payload)


def make_top_t_request(user_id: int, item_ids) -> Message:
    payload = {"item_ids": [int(i) for i in item_ids]}
    return Message.create(TOP_T_REQUEST, client_entity(user_id), SERVER, payload)


def make_final_list_push(user_id: int, items: list[dict]) -> Message:
    return Message.create(FINAL_LIST_PUSH, SERVER, client_entity(user_id), {"items": items})


# -- message schema validation (audit check "a") -----------------------------


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check_keys(payload: dict, allowed: set, where: str) -> list[str]:
    if not isinstance(payload, dict):
        return [f"{where}: not a mapping"]
    problems = []
    extra = set(payload) - allowed
    missing = allowed - set(payload)
    if extra:
        problems.append(f"{where}: unexpected fields {sorted(extra)}")
    if missing:
        problems.append(f"{where}: missing fields {sorted(missing)}")
    return problems


def _validate_item_entry(entry, idx: int, fields: set) -> list[str]:
    problems = _check_keys(entry, fields, f"items[{idx}]")
    if problems:
        return problems
    if not _is_int(entry["item_id"]):
        problems.append(f"items[{idx}].item_id: not an integer")
    if "score" in fields and not _is_num(entry["score"]):
        problems.append(f"items[{idx}].score: not a number")
    if "features" in fields and not (
        isinstance(entry["features"], list) and all(_is_num(x) for x in entry["features"])
    ):
        problems.append(f"items[{idx}].features: not a numeric list")
    if "created_at" in fields and not _is_int(entry["created_at"]):
        problems.append(f"items[{idx}].created_at: not an integer")
    if "popularity" in fields and not _is_int(entry["popularity"]):
        problems.append(f"items[{idx}].popularity: not an integer")
    return problems


def _validate_weights(payload, problems):
    w = payload.get("weights")
    if not (isinstance(w, list) and all(_is_num(x) for x in w)):
        problems.append("weights: not a numeric list")


def validate_payload_schema(kind: str, payload) -> list[str]:
    """Structural validation: each kind admits an exact field tree, and no
    kind admits a private-feature field."""
    if kind == CANDIDATE_PUSH:
        problems = _check_keys(payload, {"user_id", "items"}, "payload")
        if not problems:
            if not _is_int(payload["user_id"]):
                problems.append("user_id: not an integer")
            for i, entry in enumerate(payload["items"]):
                problems += _validate_item_entry(entry, i, {"item_id", "score", "features"})
        return problems
    if kind == GLOBAL_PARAMS_PUSH:
        problems = _check_keys(payload, {"round", "weights"}, "payload")
        if not problems:
            if not _is_int(payload["round"]):
                problems.append("round: not an integer")
            _validate_weights(payload, problems)
        return problems
    if kind == LOCAL_UPDATE_UPLOAD:
        problems = _check_keys(payload, {"weights", "sample_count"}, "payload")
        if not problems:
            _validate_weights(payload, problems)
            if not _is_int(payload["sample_count"]):
                problems.append("sample_count: not an integer")
        return problems
    if kind == TOP_T_REQUEST:
        problems = _check_keys(payload, {"item_ids"}, "payload")
        if not problems and not (
            isinstance(payload["item_ids"], list)
            and all(_is_int(x) for x in payload["item_ids"])
        ):
            problems.append("item_ids: not an integer list")
        return problems
    if kind == FINAL_LIST_PUSH:
        problems = _check_keys(payload, {"items"}, "payload")
        if not problems:
            for i, entry in enumerate(payload["items"]):
                problems += _validate_item_entry(
                    entry, i, {"item_id", "features", "created_at", "popularity"}
                )
        return problems
    return [f"unknown message kind {kind!r}"]


# -- privacy audit -----------------------------------------------------------


@dataclass(frozen=True)
class AuditVerdict:
    passed: bool
    kind: str
    reason: str | None = None

    def to_dict(self) -> dict:
        return {"passed": self.passed, "kind": self.kind, "reason": self.reason}


class Auditor:
    """Inspects serialized messages for private-scoped content.

    A message passes iff its kind's schema admits no private-feature field,
    its bytes carry no private-scoped marker, and no decimal in the payload
    equals any private feature value at 9 significant digits.
    """

    def __init__(self, dataset: Dataset):
        self._private_tokens = {nine_sig(v) for v in dataset.private_feature_values()}

    def audit(self, msg: Message) -> AuditVerdict:
        problems = validate_payload_schema(msg.kind, msg.payload)
        if problems:
            return AuditVerdict(False, msg.kind, "schema: " + "; ".join(problems))
        try:
            blob = msg.canonical_bytes()
        except (TypeError, ValueError) as exc:
            return AuditVerdict(False, msg.kind, f"unserializable payload: {exc}")
        from .data import PRIVATE_MARKER_PREFIX

        if PRIVATE_MARKER_PREFIX.encode("ascii") in blob:
            return AuditVerdict(False, msg.kind, "private-scoped marker found in payload")
        leaked = scan_float_tokens(blob) & self._private_tokens
        if leaked:
            return AuditVerdict(
                False, msg.kind,
                f"payload contains private feature value(s): {sorted(leaked)[:3]}",
            )
        return AuditVerdict(True, msg.kind)


def audit_message(msg: Message, dataset: Dataset) -> AuditVerdict:
    return Auditor(dataset).audit(msg)


# -- global model lifecycle ---------------------------------------------------


def init_global(d: int, seed: int) -> RankingParams:
    """Uniform(-0.01, 0.01) weights, zero bias (last coordinate)."""
    if d < 1:
        raise ConfigurationError(f"parameter dimension must be >= 1, got {d}")
    rng = np.random.default_rng(seed)
    weights = rng.uniform(-0.01, 0.01, size=d)
    weights[-1] = 0.0
    return RankingParams(weights)


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    params: RankingParams
    n_samples: int


def _normalize_updates(updates) -> list[ClientUpdate]:
    out = []
    for pos, upd in enumerate(updates):
        if isinstance(upd, ClientUpdate):
            out.append(upd)
        else:
            params, n = upd
            out.append(ClientUpdate(pos, params, n))
    return out


def aggregate(updates, weighted: bool = True) -> RankingParams:
    """Sample-count-weighted mean of client parameter vectors.

    Uses exact (fsum) summation per coordinate, so the result is invariant
    under permutation of the update list. ``weighted=False`` gives the plain
    mean for ablation.
    """
    updates = _normalize_updates(updates)
    if not updates:
        raise NoParticipantsError("aggregate called with no updates")
    dim = updates[0].params.dim
    for upd in updates:
        if upd.params.dim != dim:
            raise ShapeError(
                f"client {upd.client_id}: params dim {upd.params.dim} != {dim}"
            )
        if upd.n_samples < 1:
            raise ConfigurationError(
                f"client {upd.client_id}: sample count must be >= 1, got {upd.n_samples}"
            )
        if not upd.params.is_finite():
            raise RejectedUpdateError(upd.client_id, "non-finite parameter entry")
    weights_of = [float(u.n_samples) if weighted else 1.0 for u in updates]
    total = math.fsum(weights_of)
    merged = np.array(
        [
            math.fsum(w * u.params.weights[j] for w, u in zip(weights_of, updates)) / total
            for j in range(dim)
        ]
    )
    return RankingParams(merged)


def sample_clients(
    all_clients,
    participation_fraction: float,
    dropout_prob: float,
    seed: int,
    round_index: int,
) -> list[int]:
    """ceil(fraction*N) uniform clients, independent dropout, at least one
    survivor (lowest-id sampled client is retained if every draw drops)."""
    clients = sorted(int(c) for c in all_clients)
    if not clients:
        raise ConfigurationError("no clients to sample from")
    if not 0.0 < participation_fraction <= 1.0:
        raise ConfigurationError(
            f"participation_fraction must be in (0, 1], got {participation_fraction}"
        )
    if not 0.0 <= dropout_prob < 1.0:
        raise ConfigurationError(f"dropout_prob must be in [0, 1), got {dropout_prob}")
    rng = np.random.default_rng([seed, round_index])
    k = math.ceil(participation_fraction * len(clients))
    sampled = sorted(int(c) for c in rng.choice(clients, size=k, replace=False))
    survivors = [c for c in sampled if rng.random() >= dropout_prob]
    if not survivors:
        survivors = [sampled[0]]
    return survivors


def derive_client_round_seed(master_seed: int, round_index: int, client_id: int) -> int:
    ss = np.random.SeedSequence([int(master_seed), int(round_index), int(client_id)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# -- round execution -----------------------------------------------------------


@dataclass(frozen=True)
class FedConfig:
    rounds: int = 20
    participation_fraction: float = 1.0
    dropout_prob: float = 0.0
    weighted_aggregation: bool = True
    early_stop_tolerance: float = 1e-6
    max_workers: int = 1
    seed: int = 0

    def validate(self) -> list[str]:
        problems = []
        if self.rounds < 1:
            problems.append(f"rounds must be >= 1, got {self.rounds}")
        if not 0.0 < self.participation_fraction <= 1.0:
            problems.append(
                f"participation_fraction must be in (0, 1], got {self.participation_fraction}"
            )
        if not 0.0 <= self.dropout_prob < 1.0:
            problems.append(f"dropout_prob must be in [0, 1), got {self.dropout_prob}")
        if self.max_workers < 1:
            problems.append(f"max_workers must be >= 1, got {self.max_workers}")
        if self.early_stop_tolerance < 0:
            problems.append(
                f"early_stop_tolerance must be >= 0, got {self.early_stop_tolerance}"
            )
        if self.seed < 0:
            problems.append(f"seed must be >= 0, got {self.seed}")
        return problems


@dataclass
class RoundLog:
    round_index: int
    participating_clients: list
    messages: list
    bytes_up: int
    bytes_down: int
    global_params_after: RankingParams
    void: bool
    audit_verdicts: list

    def to_dict(self) -> dict:
        w = self.global_params_after.weights
        return {
            "round_index": int(self.round_index),
            "participants": [int(c) for c in self.participating_clients],
            "void": bool(self.void),
            "n_messages": len(self.messages),
            "bytes_up": int(self.bytes_up),
            "bytes_down": int(self.bytes_down),
            "theta_l2": float(np.linalg.norm(w)),
            "theta_linf": float(np.max(np.abs(w))),
            "theta": [float(x) for x in w],
            "audit": [v.to_dict() for v in self.audit_verdicts],
        }


@dataclass(frozen=True)
class ServerState:
    params: RankingParams
    round_logs: tuple = ()


def archive_message(
    msg: Message, auditor: Auditor, messages: list, verdicts: list
) -> None:
    """Audit, then archive. A failed audit aborts the experiment."""
    verdict = auditor.audit(msg)
    verdicts.append(verdict)
    messages.append(msg)
    if not verdict.passed:
        raise PrivacyViolationError(
            f"{msg.kind} from {msg.sender} failed audit: {verdict.reason}"
        )


def _direction_bytes(messages) -> tuple[int, int]:
    up = sum(m.byte_size for m in messages if m.kind in UPSTREAM_KINDS)
    down = sum(m.byte_size for m in messages if m.kind in DOWNSTREAM_KINDS)
    return up, down


def run_round(
    server: ServerState,
    clients: dict[int, ClientState],
    rank_hyper: RankHyper,
    config: FedConfig,
    round_index: int,
    auditor: Auditor,
    preamble_messages: list | None = None,
) -> tuple[ServerState, RoundLog]:
    """One federated round: push globals, train locally, upload, aggregate.

    Deterministic in (config.seed, round_index) regardless of max_workers:
    per-client rng seeds are derived from ids, and updates are merged in
    ascending client-id order.
    """
    problems = config.validate() + rank_hyper.validate()
    if problems:
        raise ConfigurationError(problems)

    messages: list[Message] = []
    verdicts: list[AuditVerdict] = []
    for msg in preamble_messages or []:
        archive_message(msg, auditor, messages, verdicts)

    participants = sample_clients(
        clients.keys(), config.participation_fraction, config.dropout_prob,
        config.seed, round_index,
    )
    for cid in participants:
        archive_message(
            make_params_push(round_index, server.params, cid), auditor, messages, verdicts
        )
        clients[cid].local_params = server.params
        clients[cid].rng_seed = derive_client_round_seed(config.seed, round_index, cid)

    def train_one(cid: int):
        return local_train(server.params, clients[cid], rank_hyper)

    if config.max_workers > 1:
        with ThreadPoolExecutor(max_workers=config.max_workers) as pool:
            results = list(pool.map(train_one, participants))
    else:
        results = [train_one(cid) for cid in participants]

    updates: list[ClientUpdate] = []
    for cid, result in zip(participants, results):
        if result is None:
            continue  # skip-round signal: no candidates on this client
        params, n = result
        archive_message(make_update_upload(cid, params, n), auditor, messages, verdicts)
        updates.append(ClientUpdate(cid, params, n))

    if updates:
        new_params = aggregate(updates, weighted=config.weighted_aggregation)
        void = False
    else:
        new_params = server.params
        void = True

    bytes_up, bytes_down = _direction_bytes(messages)
    log = RoundLog(
        round_index=round_index,
        participating_clients=participants,
        messages=messages,
        bytes_up=bytes_up,
        bytes_down=bytes_down,
        global_params_after=new_params,
        void=void,
        audit_verdicts=verdicts,
    )
    new_server = replace(server, params=new_params, round_logs=server.round_logs + (log,))
    return new_server, log
