import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Optional, Sequence, Union

from django.conf import settings

from mkgrag.api.serializers import DatasetRecordSerializer, format_errors
from mkgrag.services.answering import generate_answer
from mkgrag.services.backends import (
    HttpBackend,
    LimitedBackend,
    MockBackend,
    load_fixtures,
)
from mkgrag.services.corpus import ImageAsset
from mkgrag.services.evaluation import (
    CONTAINS,
    EXACT,
    EvalRecord,
    element_recall,
    mean_non_gold_segments,
    recall_at_k,
    vqa_accuracy,
)
from mkgrag.services.index import VectorIndex
from mkgrag.services.retrieval import GRAPH_MODE, MODES, Query, RetrievalPipeline
from mkgrag.utils import write_json

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
RECALL_CUTOFFS = (1, 5, 10, 20, 50)


class ExperimentError(Exception):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    k_d: int = 10
    k_g: int = 10
    hops: int = 1
    rho: float = 0.9
    chunk_max_tokens: int = 512
    chunk_min_tokens: int = 64
    include_headings: bool = True
    context_budget: int = 4096
    mode: str = GRAPH_MODE
    reformulate: bool = False
    backend: str = "mock"
    backend_url: str = ""
    backend_profile: str = "native"
    mock_fixtures: str = ""
    embedding_dim: int = 256
    kg_dir: str = ""
    index_file: str = ""
    parallelism: int = 1
    seed: int = 0

    def __post_init__(self):
        for name in ("k_d", "k_g", "chunk_max_tokens", "chunk_min_tokens", "context_budget", "parallelism"):
            if getattr(self, name) < 1:
                raise ExperimentError(f"{name} must be at least 1, got {getattr(self, name)}")
        if self.hops < 0:
            raise ExperimentError(f"hops must be non-negative, got {self.hops}")
        if self.mode not in MODES:
            raise ExperimentError(f"unknown mode: {self.mode}")

    @classmethod
    def from_settings(cls, **overrides) -> "ExperimentConfig":
        values = dict(
            k_d=settings.MKGRAG_K_D,
            k_g=settings.MKGRAG_K_G,
            hops=settings.MKGRAG_HOPS,
            rho=settings.MKGRAG_RHO,
            chunk_max_tokens=settings.MKGRAG_CHUNK_MAX_TOKENS,
            chunk_min_tokens=settings.MKGRAG_CHUNK_MIN_TOKENS,
            include_headings=settings.MKGRAG_CHUNK_INCLUDE_HEADINGS,
            context_budget=settings.MKGRAG_CONTEXT_BUDGET,
            reformulate=settings.MKGRAG_REFORMULATE_QUESTION,
            backend=settings.MKGRAG_BACKEND,
            backend_url=settings.MKGRAG_BACKEND_URL,
            backend_profile=settings.MKGRAG_BACKEND_PROFILE,
            mock_fixtures=settings.MKGRAG_MOCK_FIXTURES,
            embedding_dim=settings.MKGRAG_EMBEDDING_DIM,
            kg_dir=settings.MKGRAG_KG_FOLDER,
            index_file=settings.MKGRAG_INDEX_FILE,
            parallelism=settings.MKGRAG_PARALLELISM,
            seed=settings.MKGRAG_SEED,
        )
        values.update(overrides)
        return cls(**values)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ExperimentError(f"unknown config key: {key}")
        overrides = dict(data)
        # The environment wins over endpoints written in config files
        env_url = os.getenv("MKGRAG_BACKEND_URL")
        if env_url:
            overrides["backend_url"] = env_url
        try:
            return cls.from_settings(**overrides)
        except TypeError as error:
            raise ExperimentError(f"invalid config: {error}") from error

    def to_dict(self) -> dict:
        return asdict(self)

    def create_backend(self):
        if self.backend == "mock":
            inner = MockBackend(fixtures=load_fixtures(self.mock_fixtures), dim=self.embedding_dim)
        elif self.backend == "http":
            inner = HttpBackend(
                self.backend_url, profile=self.backend_profile, dim=self.embedding_dim
            )
        else:
            raise ExperimentError(f"unknown backend: {self.backend}")
        return LimitedBackend(inner, settings.MKGRAG_BACKEND_MAX_IN_FLIGHT)


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as error:
        raise ExperimentError(f"could not read config {path}: {error}") from error
    if not isinstance(data, dict):
        raise ExperimentError(f"config {path} must be a JSON object")
    return ExperimentConfig.from_dict(data)


@dataclass
class DatasetRecord:
    question: str
    gold_doc_id: str
    gold_answers: List[str]
    image_id: str = ""
    image_uri: str = ""
    query_id: str = ""
    split: Optional[str] = None
    gold_elements: List[str] = field(default_factory=list)
    gold_segment_ids: List[str] = field(default_factory=list)

    def to_query(self) -> Query:
        image = ImageAsset(image_id=self.image_id, uri=self.image_uri) if self.image_id else None
        return Query(question=self.question, image=image)


def load_dataset(path: str) -> List[DatasetRecord]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as error:
        raise ExperimentError(f"could not read dataset {path}: {error}") from error

    dataset = []
    for line_number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
        except json.JSONDecodeError as error:
            raise ExperimentError(f"{path}:{line_number}: invalid JSON: {error.msg}") from error
        serializer = DatasetRecordSerializer(data=data)
        if not serializer.is_valid():
            raise ExperimentError(f"{path}:{line_number}: {format_errors(serializer.errors)}")
        record = DatasetRecord(**serializer.validated_data)
        dataset.append(replace(record, query_id=record.query_id or f"q{line_number}"))
    if not dataset:
        raise ExperimentError(f"dataset {path} is empty")
    return dataset


def _metrics(records: Sequence[EvalRecord]) -> dict:
    metrics = {
        "count": len(records),
        "accuracy_exact": vqa_accuracy(records, EXACT),
        "accuracy_contains": vqa_accuracy(records, CONTAINS),
    }
    for k in RECALL_CUTOFFS:
        metrics[f"recall@{k}"] = recall_at_k(records, k)
    metrics["element_recall"] = element_recall(records)
    metrics["non_gold_segments"] = mean_non_gold_segments(records)
    return metrics


def _load_index(cfg: ExperimentConfig) -> VectorIndex:
    if not cfg.index_file or not os.path.exists(cfg.index_file):
        raise ExperimentError(f"missing vector index: {cfg.index_file}")
    return VectorIndex.load(cfg.index_file)


def run_experiment(
    cfg: ExperimentConfig,
    dataset: Union[str, Sequence[DatasetRecord]],
    backend=None,
    index: VectorIndex = None,
) -> dict:
    dataset_path = dataset if isinstance(dataset, str) else None
    records = load_dataset(dataset) if dataset_path else list(dataset)
    if not cfg.kg_dir or not os.path.isdir(cfg.kg_dir):
        raise ExperimentError(f"missing knowledge graph folder: {cfg.kg_dir}")
    index = index or _load_index(cfg)
    backend = backend or cfg.create_backend()

    pipeline = RetrievalPipeline(
        index,
        backend,
        kg_dir=cfg.kg_dir,
        k_d=cfg.k_d,
        k_g=cfg.k_g,
        hops=cfg.hops,
        rho=cfg.rho,
        budget=cfg.context_budget,
        mode=cfg.mode,
        reformulate=cfg.reformulate,
    )

    def evaluate(record: DatasetRecord):
        start = time.perf_counter()
        result = pipeline.retrieve(record.to_query())
        answer_start = time.perf_counter()
        predicted = generate_answer(result.query, result.context, backend, seed=cfg.seed)
        end = time.perf_counter()
        timings = dict(result.timings, answer=end - answer_start, total=end - start)

        eval_record = EvalRecord(
            question=record.question,
            gold_doc_id=record.gold_doc_id,
            gold_answers=record.gold_answers,
            predicted=predicted,
            retrieved_doc_ids=[hit.item_id for hit in result.document_hits],
            query_id=record.query_id,
            split=record.split,
            gold_elements=record.gold_elements,
            retrieved_elements=[e.element_id for e in result.subgraph.expansion],
            gold_segment_ids=record.gold_segment_ids,
            context_segment_ids=result.context.segment_ids,
        )
        seeds = [hit.item_id for hit in result.ranking.seeds]
        detail = {
            "query_id": record.query_id,
            "predicted": predicted,
            "gold_rank": eval_record.gold_rank,
            "top_element": seeds[0] if seeds else None,
            "context_segments": result.context.segment_ids,
            "context_tokens": result.context.token_count,
        }
        return eval_record, detail, timings

    if cfg.parallelism > 1:
        with ThreadPoolExecutor(max_workers=cfg.parallelism) as executor:
            outcomes = list(executor.map(evaluate, records))
    else:
        outcomes = [evaluate(record) for record in records]

    eval_records = [outcome[0] for outcome in outcomes]
    timings: Dict[str, float] = {}
    for _, _, query_timings in outcomes:
        for stage, seconds in query_timings.items():
            timings[stage] = timings.get(stage, 0.0) + seconds

    splits = {}
    for label in sorted({r.split for r in eval_records if r.split}):
        splits[label] = _metrics([r for r in eval_records if r.split == label])

    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "config": cfg.to_dict(),
        "dataset": {"path": dataset_path, "size": len(records)},
        "metrics": _metrics(eval_records),
        "splits": splits,
        "queries": [outcome[1] for outcome in outcomes],
        "timings": timings,
    }
    logger.info(
        f"Experiment mode={cfg.mode} k_g={cfg.k_g} hops={cfg.hops}: "
        f"accuracy {report['metrics']['accuracy_exact']:.3f}, "
        f"R@1 {report['metrics']['recall@1']:.3f} over {len(records)} queries"
    )
    return report


def run_sweep(
    cfg: ExperimentConfig,
    dataset: Union[str, Sequence[DatasetRecord]],
    k_g: Sequence[int] = None,
    hops: Sequence[int] = None,
    modes: Sequence[str] = None,
    backend=None,
    index: VectorIndex = None,
) -> List[dict]:
    records = load_dataset(dataset) if isinstance(dataset, str) else list(dataset)
    index = index or _load_index(cfg)
    backend = backend or cfg.create_backend()
    reports = []
    for mode in modes or [cfg.mode]:
        for hop_count in hops or [cfg.hops]:
            for k in k_g or [cfg.k_g]:
                point = replace(cfg, mode=mode, hops=hop_count, k_g=k)
                reports.append(run_experiment(point, records, backend=backend, index=index))
    return reports


def render_report(report: dict, include_timings: bool = True) -> str:
    if not include_timings:
        report = {key: value for key, value in report.items() if key != "timings"}
    return json.dumps(report, indent=2, sort_keys=True)


def save_report(report: dict, path: str):
    write_json(path, report)
