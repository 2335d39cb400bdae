"""End-to-end experiment runner.

Wires the pipeline: dataset -> evaluation split -> recall training ->
candidate distribution -> federated ranking rounds -> serving
(local rank, Top-T, re-rank) -> four-system evaluation -> verdict, and
writes all artifacts (JSON reports, delimited tables, figures) under one
output directory. Deterministic for a fixed (config, seed), independent of
client-simulation parallelism.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import reporting
from .config import ExperimentConfig
from .data import Dataset, generate_synthetic, load_dataset
from .errors import FedRecSimError
from .evaluation import (
    EvalSplit,
    MetricsReport,
    VerdictReport,
    combine_local_reports,
    delta_precision_report,
    evaluate_system,
    make_lr_system,
    make_split,
    train_centralized_sum,
    train_local_only,
)
from .data import feature_dim
from .federation import (
    Auditor,
    RoundLog,
    ServerState,
    _direction_bytes,
    archive_message,
    init_global,
    make_candidate_push,
    make_final_list_push,
    make_full_catalog_push,
    make_params_push,
    make_top_t_request,
    run_round,
)
from .ranking import build_client_states, local_rank, select_top_t
from .recall import recall_top_k, save_model, train_recall
from .rerank import apply_policy

# Sub-seed tags derived from the master seed; one stream per concern.
SEED_DATA = 0
SEED_RECALL = 1
SEED_PARAMS = 2
SEED_PROTOCOL = 3
SEED_EVAL = 4
SEED_SUM = 5


def derive_seed(master_seed: int, tag: int) -> int:
    ss = np.random.SeedSequence([int(master_seed), int(tag)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass
class ExperimentResult:
    outdir: Path
    reports: dict  # label -> MetricsReport
    local_reports: list
    verdict: VerdictReport
    round_logs: list
    rounds_executed: int
    communication: dict
    artifacts: list  # relative paths
    split_fingerprint: str


def build_dataset(config: ExperimentConfig) -> Dataset:
    if config.synth is not None:
        return generate_synthetic(config.synth, derive_seed(config.seed, SEED_DATA))
    return load_dataset(
        config.csv.catalog, config.csv.public, config.csv.private, config.csv.interactions
    )


def _assert_split_hygiene(split: EvalSplit) -> None:
    for uid in split.evaluated_users:
        overlap = set(split.heldout[uid]) & split.train_dataset.interacted_items(uid)
        if overlap:
            raise AssertionError(
                f"split hygiene violated: held-out items {sorted(overlap)} remain "
                f"in user {uid}'s training log"
            )


def _communication_accounting(candidate_messages, dataset: Dataset, k: int) -> dict:
    cand_total = sum(m.byte_size for m in candidate_messages)
    n = len(candidate_messages)
    full = [make_full_catalog_push(m.payload["user_id"], dataset) for m in candidate_messages]
    full_total = sum(m.byte_size for m in full)
    return {
        "n_clients": n,
        "candidate_bytes_per_client": cand_total / n if n else 0.0,
        "full_catalog_bytes_per_client": full_total / n if n else 0.0,
        "ratio": (cand_total / full_total) if full_total else 0.0,
        "k_over_m": k / dataset.n_items,
    }


def run_experiment(config: ExperimentConfig, outdir) -> ExperimentResult:
    """Execute one experiment and write every artifact under ``outdir``.

    Raises on any module error; whatever artifacts exist at that point have
    already been flushed to disk.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    artifacts: list[str] = []

    def flush(relpath: str, writer, *args) -> Path:
        path = writer(outdir / relpath, *args)
        artifacts.append(relpath)
        return path

    try:
        return _run(config, outdir, artifacts, flush)
    except Exception as exc:
        # Partial artifacts are already on disk; record what happened.
        reporting.write_json(
            outdir / "run_summary.json",
            {"status": "error", "error": f"{type(exc).__name__}: {exc}",
             "artifacts": sorted(artifacts)},
        )
        raise


def _run(config: ExperimentConfig, outdir: Path, artifacts: list, flush) -> ExperimentResult:
    dataset = build_dataset(config)
    if config.k_candidates >= dataset.n_items:
        raise FedRecSimError(
            f"K={config.k_candidates} is not smaller than the catalog "
            f"(M={dataset.n_items})"
        )

    split = make_split(
        dataset,
        config.eval.holdout_per_user,
        config.eval.negatives_per_positive,
        derive_seed(config.seed, SEED_EVAL),
    )
    _assert_split_hygiene(split)
    train = split.train_dataset

    # Recall layer: trained once per experiment, on public data only.
    recall_model = train_recall(
        train, config.recall_hyper, derive_seed(config.seed, SEED_RECALL)
    )
    flush("recall_model.npz", lambda p: (save_model(recall_model, p), p)[1])

    # Candidates with exclude_seen=False so training labels can be positive.
    candidate_sets = {
        uid: recall_top_k(recall_model, uid, train.catalog, config.k_candidates,
                          exclude_seen=False)
        for uid in train.user_ids
    }
    clients = build_client_states(train, candidate_sets)
    auditor = Auditor(dataset)

    candidate_messages = [
        make_candidate_push(
            uid,
            candidate_sets[uid],
            {iid: train.item(iid).feature_vector for iid in candidate_sets[uid].item_ids},
        )
        for uid in sorted(candidate_sets)
    ]
    communication = _communication_accounting(candidate_messages, train, config.k_candidates)

    # Federated ranking rounds.
    dim = feature_dim(train.dims)
    params = init_global(dim, derive_seed(config.seed, SEED_PARAMS))
    server = ServerState(params=params)
    fed = replace(config.fed, seed=derive_seed(config.seed, SEED_PROTOCOL))
    round_logs: list[RoundLog] = []
    prev = server.params.weights
    for round_index in range(1, fed.rounds + 1):
        preamble = candidate_messages if round_index == 1 else None
        server, log = run_round(
            server, clients, config.rank_hyper, fed, round_index, auditor,
            preamble_messages=preamble,
        )
        round_logs.append(log)
        delta = float(np.max(np.abs(server.params.weights - prev)))
        prev = server.params.weights
        if fed.early_stop_tolerance > 0 and delta < fed.early_stop_tolerance:
            break

    # Serving pass: final parameters out, Top-T requests in, re-ranked
    # content back. Messages ride on the last round's log.
    last_log = round_logs[-1]
    current_timestep = 1 + max(
        (ev.timestep for u in train.public_store for ev in u.interaction_log), default=0
    )
    serving_messages: list = []
    final_lists: dict[int, list] = {}
    for uid in sorted(clients):
        state = clients[uid]
        archive_message(
            make_params_push(last_log.round_index + 1, server.params, uid),
            auditor, serving_messages, last_log.audit_verdicts,
        )
        state.local_params = server.params
        if state.candidates is None or not state.candidates.items:
            continue
        ranked = local_rank(server.params, state)
        top_ids = select_top_t(ranked, config.top_t)
        archive_message(
            make_top_t_request(uid, top_ids),
            auditor, serving_messages, last_log.audit_verdicts,
        )
        items = apply_policy(top_ids, train, config.policy, current_timestep)
        archive_message(
            make_final_list_push(uid, items),
            auditor, serving_messages, last_log.audit_verdicts,
        )
        final_lists[uid] = [entry["item_id"] for entry in items]
    last_log.messages.extend(serving_messages)
    last_log.bytes_up, last_log.bytes_down = _direction_bytes(last_log.messages)

    round_dicts = [log.to_dict() for log in round_logs]
    flush("rounds.jsonl", reporting.write_jsonl, round_dicts)
    flush("rounds.csv", reporting.write_rounds_csv, round_dicts)

    # Four-system evaluation on the shared split.
    k_values, primary_k = config.eval.k_values, config.eval.primary_k
    sum_epochs = config.fed.rounds * config.rank_hyper.local_epochs
    sum_seed = derive_seed(config.seed, SEED_SUM)

    fl_system = make_lr_system(server.params, dataset, use_private=True)
    p_fl = evaluate_system(fl_system, split, k_values, primary_k, "FL")

    sum_params = train_centralized_sum(
        clients, config.rank_hyper, sum_epochs, sum_seed, use_private=True
    )
    p_sum = evaluate_system(
        make_lr_system(sum_params, dataset, use_private=True),
        split, k_values, primary_k, "Sum",
    )

    pub_params = train_centralized_sum(
        clients, config.rank_hyper, sum_epochs, sum_seed, use_private=False
    )
    p_public = evaluate_system(
        make_lr_system(pub_params, dataset, use_private=False),
        split, k_values, primary_k, "PublicOnly",
    )

    init_seed = derive_seed(config.seed, SEED_PARAMS)
    protocol_seed = fed.seed
    p_locals: list[MetricsReport] = []
    for uid in split.evaluated_users:
        if uid not in clients:
            continue
        local_params = train_local_only(
            clients[uid], config.rank_hyper, config.fed.rounds, init_seed, protocol_seed
        )
        if local_params is None:
            continue
        local_system = make_lr_system(local_params, dataset, use_private=True)
        p_locals.append(
            evaluate_system(local_system, split, k_values, primary_k,
                            f"Local({uid})", user_ids=[uid])
        )
    p_local_combined = combine_local_reports(p_locals)

    verdict = delta_precision_report(p_sum, p_fl, p_locals, config.eval.delta_threshold)

    flush("metrics_FL.json", reporting.write_json, p_fl.to_dict())
    flush("metrics_Sum.json", reporting.write_json, p_sum.to_dict())
    flush("metrics_PublicOnly.json", reporting.write_json, p_public.to_dict())
    flush(
        "metrics_Local.json", reporting.write_json,
        {"combined": p_local_combined.to_dict(),
         "per_client": [r.to_dict() for r in p_locals]},
    )
    flush("verdict.json", reporting.write_json, verdict.to_dict())

    all_verdicts = [v for log in round_logs for v in log.audit_verdicts]
    by_kind: dict[str, int] = {}
    for v in all_verdicts:
        by_kind[v.kind] = by_kind.get(v.kind, 0) + 1
    flush(
        "audit_summary.json", reporting.write_json,
        {
            "total_messages": len(all_verdicts),
            "passed": sum(1 for v in all_verdicts if v.passed),
            "all_passed": all(v.passed for v in all_verdicts),
            "by_kind": dict(sorted(by_kind.items())),
        },
    )

    ordered_reports = [p_fl, p_sum, p_public, p_local_combined]
    flush("metrics.csv", reporting.write_metrics_csv, ordered_reports)
    for fig_path in reporting.render_figures(
        outdir / "figures", round_dicts, ordered_reports, primary_k,
        config.eval.delta_threshold,
    ):
        artifacts.append(str(fig_path.relative_to(outdir)))

    summary = {
        "status": "ok",
        "rounds_executed": len(round_logs),
        "communication": communication,
        "delta_pass": verdict.delta_pass,
        "gap_primary": verdict.gap_primary,
        "validity_fraction": verdict.validity_fraction,
        "fl_exceeds_mean_local": verdict.fl_exceeds_mean_local,
        "split_fingerprint": split.fingerprint,
        "n_final_lists": len(final_lists),
        "artifacts": sorted(artifacts),
    }
    reporting.write_json(outdir / "run_summary.json", summary)
    artifacts.append("run_summary.json")

    return ExperimentResult(
        outdir=outdir,
        reports={"FL": p_fl, "Sum": p_sum, "PublicOnly": p_public,
                 "Local": p_local_combined},
        local_reports=p_locals,
        verdict=verdict,
        round_logs=round_logs,
        rounds_executed=len(round_logs),
        communication=communication,
        artifacts=sorted(artifacts),
        split_fingerprint=split.fingerprint,
    )
