import re
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

EXACT = "exact"
CONTAINS = "contains"

_punctuation = re.compile(r"[^\w\s]")
_leading_article = re.compile(r"^(?:(?:a|an|the)\s+)+")


class EvaluationError(Exception):
    pass


@dataclass
class EvalRecord:
    question: str
    gold_doc_id: str
    gold_answers: List[str]
    predicted: str = ""
    # Retrieved document ids, best first
    retrieved_doc_ids: List[str] = field(default_factory=list)
    query_id: str = ""
    split: Optional[str] = None
    gold_elements: List[str] = field(default_factory=list)
    retrieved_elements: List[str] = field(default_factory=list)
    gold_segment_ids: List[str] = field(default_factory=list)
    context_segment_ids: List[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.gold_answers:
            raise EvaluationError(f"record {self.query_id or self.question!r} has no gold answers")

    @property
    def gold_rank(self) -> Optional[int]:
        try:
            return self.retrieved_doc_ids.index(self.gold_doc_id) + 1
        except ValueError:
            return None

    @property
    def non_gold_segments(self) -> int:
        gold = set(self.gold_segment_ids)
        return len({s for s in self.context_segment_ids if s not in gold})


def normalize_answer(text: str) -> str:
    text = _punctuation.sub("", text.lower())
    text = " ".join(text.split())
    return _leading_article.sub("", text)


def is_correct(record: EvalRecord, mode: str = EXACT) -> bool:
    predicted = normalize_answer(record.predicted)
    golds = [normalize_answer(answer) for answer in record.gold_answers]
    if mode == EXACT:
        return predicted in golds
    if mode == CONTAINS:
        return any(gold and gold in predicted for gold in golds)
    raise EvaluationError(f"unknown accuracy mode: {mode}")


def vqa_accuracy(records: Sequence[EvalRecord], mode: str = EXACT) -> float:
    if not records:
        raise EvaluationError("no records to score")
    return sum(is_correct(record, mode) for record in records) / len(records)


def recall_at_k(records: Sequence[EvalRecord], k: int) -> float:
    if k < 1:
        raise EvaluationError(f"k must be at least 1, got {k}")
    if not records:
        return 0.0
    hits = sum(1 for r in records if r.gold_rank is not None and r.gold_rank <= k)
    return hits / len(records)


def element_recall(records: Sequence[EvalRecord]) -> Optional[float]:
    # Fraction of gold elements present among the retrieved ones, over records that declare any
    labelled = [r for r in records if r.gold_elements]
    if not labelled:
        return None
    found = sum(len(set(r.gold_elements) & set(r.retrieved_elements)) for r in labelled)
    total = sum(len(set(r.gold_elements)) for r in labelled)
    return found / total


def mean_non_gold_segments(records: Sequence[EvalRecord]) -> Optional[float]:
    labelled = [r for r in records if r.gold_segment_ids]
    if not labelled:
        return None
    return sum(r.non_gold_segments for r in labelled) / len(labelled)
