"""Experiment configuration: YAML parsing and exhaustive validation.

``validate_config`` reports every violation found, not just the first, so a
bad config can be fixed in one pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .data import SynthConfig
from .errors import ConfigurationError
from .federation import FedConfig
from .ranking import RankHyper
from .recall import RecallHyper
from .rerank import RerankPolicy


@dataclass(frozen=True)
class EvalConfig:
    holdout_per_user: int = 1
    negatives_per_positive: int = 99
    k_values: tuple = (1, 5, 10)
    primary_k: int = 10
    delta_threshold: float = 0.05

    def validate(self) -> list[str]:
        problems = []
        if self.holdout_per_user < 1:
            problems.append(f"holdout_per_user must be >= 1, got {self.holdout_per_user}")
        if self.negatives_per_positive < 1:
            problems.append(
                f"negatives_per_positive must be >= 1, got {self.negatives_per_positive}"
            )
        if not self.k_values or any(k < 1 for k in self.k_values):
            problems.append(f"k_values must all be >= 1, got {list(self.k_values)}")
        if self.primary_k not in self.k_values:
            problems.append(
                f"primary_k {self.primary_k} must be one of k_values {list(self.k_values)}"
            )
        if not self.delta_threshold > 0:
            problems.append(f"delta_threshold must be > 0, got {self.delta_threshold}")
        return problems


@dataclass(frozen=True)
class CsvPaths:
    catalog: Path
    public: Path
    private: Path
    interactions: Path | None = None

    def validate(self) -> list[str]:
        problems = []
        for name in ("catalog", "public", "private", "interactions"):
            p = getattr(self, name)
            if p is not None and not Path(p).is_file():
                problems.append(f"dataset.csv.{name}: file not found: {p}")
        return problems


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    synth: SynthConfig | None = None
    csv: CsvPaths | None = None
    recall_hyper: RecallHyper = field(default_factory=RecallHyper)
    k_candidates: int = 20
    top_t: int = 10
    rank_hyper: RankHyper = field(default_factory=RankHyper)
    fed: FedConfig = field(default_factory=FedConfig)
    policy: RerankPolicy = field(default_factory=RerankPolicy)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> list[str]:
        problems = []
        if self.seed < 0:
            problems.append(f"seed must be >= 0, got {self.seed}")
        if (self.synth is None) == (self.csv is None):
            problems.append("dataset: exactly one of `synthetic` or `csv` must be given")
        if self.synth is not None:
            problems += self.synth.validate()
            if self.k_candidates >= self.synth.n_items:
                problems.append(
                    f"k_candidates ({self.k_candidates}) must be < n_items "
                    f"({self.synth.n_items})"
                )
        if self.csv is not None:
            problems += self.csv.validate()
        if self.k_candidates < 1:
            problems.append(f"k_candidates must be >= 1, got {self.k_candidates}")
        if not 1 < self.top_t < max(self.k_candidates, 2):
            problems.append(
                f"top_t must satisfy 1 < T < K, got T={self.top_t}, K={self.k_candidates}"
            )
        problems += self.recall_hyper.validate()
        problems += self.rank_hyper.validate()
        problems += self.fed.validate()
        problems += self.policy.validate()
        if self.policy.output_size > self.top_t:
            problems.append(
                f"rerank output_size ({self.policy.output_size}) must be <= top_t "
                f"({self.top_t})"
            )
        problems += self.eval.validate()
        return problems


def _build_section(cls, data: dict, where: str, problems: list[str], convert=None,
                   fallback="default"):
    """Instantiate a frozen dataclass from a mapping, recording every bad or
    unknown key instead of raising."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        problems.append(f"{where}: expected a mapping, got {type(data).__name__}")
        return cls() if fallback == "default" else None
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            problems.append(f"{where}.{key}: unknown field")
            continue
        if convert and key in convert:
            try:
                value = convert[key](value)
            except (TypeError, ValueError) as exc:
                problems.append(f"{where}.{key}: {exc}")
                continue
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        problems.append(f"{where}: {exc}")
        return cls() if fallback == "default" else None


def parse_config(data: dict) -> tuple[ExperimentConfig, list[str]]:
    """Build an ExperimentConfig from a parsed YAML mapping, collecting all
    violations. The returned config is meaningful only when the list is
    empty."""
    problems: list[str] = []
    if not isinstance(data, dict):
        return ExperimentConfig(), ["config root must be a mapping"]
    known_top = {
        "seed", "dataset", "recall", "k_candidates", "top_t",
        "ranking", "federation", "rerank", "evaluation",
    }
    for key in data:
        if key not in known_top:
            problems.append(f"{key}: unknown top-level field")

    dataset_sec = data.get("dataset") or {}
    synth = None
    csv_paths = None
    section_failed = False
    if isinstance(dataset_sec, dict):
        unknown = set(dataset_sec) - {"synthetic", "csv"}
        for key in unknown:
            problems.append(f"dataset.{key}: unknown field")
        if "synthetic" in dataset_sec:
            synth = _build_section(SynthConfig, dataset_sec["synthetic"],
                                   "dataset.synthetic", problems, fallback=None)
            section_failed = synth is None
        if "csv" in dataset_sec:
            csv_paths = _build_section(
                CsvPaths, dataset_sec["csv"], "dataset.csv", problems,
                convert={name: Path for name in ("catalog", "public", "private", "interactions")},
                fallback=None,
            )
            section_failed = section_failed or csv_paths is None
    else:
        problems.append("dataset: expected a mapping")
        section_failed = True

    cfg = ExperimentConfig(
        seed=data.get("seed", 0),
        synth=synth,
        csv=csv_paths,
        recall_hyper=_build_section(RecallHyper, data.get("recall"), "recall", problems),
        k_candidates=data.get("k_candidates", 20),
        top_t=data.get("top_t", 10),
        rank_hyper=_build_section(RankHyper, data.get("ranking"), "ranking", problems),
        fed=_build_section(FedConfig, data.get("federation"), "federation", problems),
        policy=_build_section(RerankPolicy, data.get("rerank"), "rerank", problems),
        eval=_build_section(
            EvalConfig, data.get("evaluation"), "evaluation", problems,
            convert={"k_values": tuple},
        ),
    )
    try:
        section_problems = cfg.validate()
    except TypeError as exc:
        section_problems = [f"config: {exc}"]
    if section_failed:
        # A dataset section was present but unbuildable; drop the redundant
        # "exactly one of" complaint that the missing section would trigger.
        section_problems = [
            p for p in section_problems if not p.startswith("dataset: exactly one")
        ]
    problems += section_problems
    return cfg, problems


def load_config(path) -> tuple[ExperimentConfig, list[str]]:
    path = Path(path)
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigurationError([f"cannot read config file {path}: {exc}"]) from exc
    except yaml.YAMLError as exc:
        return ExperimentConfig(), [f"{path}: invalid YAML: {exc}"]
    return parse_config(data if data is not None else {})


def validate_config(path) -> ExperimentConfig:
    """Load and validate; raises ConfigurationError carrying every violation."""
    cfg, problems = load_config(path)
    if problems:
        raise ConfigurationError(problems)
    return cfg
