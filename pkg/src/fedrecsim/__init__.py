"""fedrecsim: deterministic simulator for a privacy-preserving federated
recommender pipeline (server-side recall, on-client federated ranking,
server-side re-rank) with a wire-level privacy auditor and an evaluation
harness comparing federated, centralized, local-only and public-only
models."""

from .config import EvalConfig, ExperimentConfig, load_config, validate_config
from .data import (
    Dataset,
    Interaction,
    ItemRecord,
    PrivateShard,
    PublicUserRecord,
    SynthConfig,
    featurize,
    generate_synthetic,
    load_dataset,
    record_interaction,
)
from .evaluation import (
    EvalSplit,
    MetricsReport,
    VerdictReport,
    delta_precision_report,
    evaluate_system,
    make_split,
    ndcg_at_k,
    precision_at_k,
    recall_at_k,
)
from .experiment import ExperimentResult, run_experiment
from .federation import (
    Auditor,
    AuditVerdict,
    FedConfig,
    Message,
    RoundLog,
    aggregate,
    audit_message,
    init_global,
    run_round,
    sample_clients,
)
from .ranking import (
    ClientState,
    RankedList,
    RankHyper,
    RankingParams,
    local_gradient,
    local_rank,
    local_train,
    predict,
    select_top_t,
)
from .recall import (
    CandidateSet,
    RecallHyper,
    RecallModel,
    popularity_recall,
    recall_top_k,
    train_recall,
)
from .rerank import RerankPolicy, apply_policy, cold_start_list, mmr_rerank

__version__ = "0.1.0"

__all__ = [
    "Auditor",
    "AuditVerdict",
    "CandidateSet",
    "ClientState",
    "Dataset",
    "EvalConfig",
    "EvalSplit",
    "ExperimentConfig",
    "ExperimentResult",
    "FedConfig",
    "Interaction",
    "ItemRecord",
    "Message",
    "MetricsReport",
    "PrivateShard",
    "PublicUserRecord",
    "RankHyper",
    "RankedList",
    "RankingParams",
    "RecallHyper",
    "RecallModel",
    "RerankPolicy",
    "RoundLog",
    "SynthConfig",
    "VerdictReport",
    "aggregate",
    "apply_policy",
    "audit_message",
    "cold_start_list",
    "delta_precision_report",
    "evaluate_system",
    "featurize",
    "generate_synthetic",
    "init_global",
    "load_config",
    "load_dataset",
    "local_gradient",
    "local_rank",
    "local_train",
    "make_split",
    "mmr_rerank",
    "ndcg_at_k",
    "popularity_recall",
    "precision_at_k",
    "predict",
    "recall_at_k",
    "recall_top_k",
    "record_interaction",
    "run_experiment",
    "run_round",
    "sample_clients",
    "select_top_t",
    "train_recall",
    "validate_config",
]
