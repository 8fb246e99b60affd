"""
Dual-stage retrieval.

Stage one recalls candidate documents from the vector index. Stage two merges
the candidates' knowledge graphs into a query graph, ranks its entities and
relationships against the query, expands the best ones breadth-first and
assembles the answer context from the retained elements and the segments
they were extracted from.
"""

import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import networkx as nx
from django.conf import settings

from mkgrag.services import records
from mkgrag.services.backends import (
    EVIDENCE,
    QUERY,
    EmbeddingBackend,
    EmbeddingVector,
    embed_text,
)
from mkgrag.services.corpus import ImageAsset, Segment
from mkgrag.services.fusion import (
    GraphNotFoundError,
    MMEdge,
    MMEntity,
    MultimodalKG,
    RegionAttachment,
    doc_id_of,
    load_document_graph,
    merge_graphs,
    segment_sort_key,
)
from mkgrag.services.index import (
    DOCUMENT,
    EDGE,
    ENTITY,
    SEGMENT,
    IndexEntry,
    ScoredHit,
    VectorIndex,
)
from mkgrag.utils import count_tokens

logger = logging.getLogger(__name__)

GRAPH_MODE = "graph"
CHUNK_MODE = "chunk"
MODES = (GRAPH_MODE, CHUNK_MODE)


class RetrievalError(Exception):
    pass


class MissingGraphError(RetrievalError):
    def __init__(self, doc_id: str):
        super().__init__(f"missing knowledge graph for document {doc_id}")
        self.doc_id = doc_id


class ContextBudgetError(RetrievalError):
    pass


@dataclass(frozen=True)
class Query:
    question: str
    image: Optional[ImageAsset] = None

    def __post_init__(self):
        if not self.question or not self.question.strip():
            raise RetrievalError("empty question")

    @property
    def image_refs(self) -> Tuple[str, ...]:
        return (self.image.image_id,) if self.image else ()


def embed_query(query: Query, backend: EmbeddingBackend, dim: int = None, text: str = None):
    return embed_text(backend, QUERY, text or query.question, query.image_refs, dim)


def retrieve_documents(
    query: Query,
    k_d: int,
    index: VectorIndex,
    backend: EmbeddingBackend = None,
    query_vector: EmbeddingVector = None,
) -> List[ScoredHit]:
    if index.size(DOCUMENT) == 0:
        raise RetrievalError("empty index")
    if query_vector is None:
        query_vector = embed_query(query, backend, index.dim)
    return index.search_topk(query_vector, DOCUMENT, k_d)


@dataclass
class ComposedGraph:
    kg: MultimodalKG
    doc_ids: Tuple[str, ...] = ()
    segments: Dict[str, Segment] = field(default_factory=dict)
    titles: Dict[str, str] = field(default_factory=dict)

    def element(self, kind: str, element_id: str):
        if kind == ENTITY:
            return self.kg.nodes.get(element_id)
        return self.kg.edges.get(tuple(element_id.split("|", 1)))

    def provenance(self, kind: str, element_id: str) -> set:
        element = self.element(kind, element_id)
        return element.doc_ids if element else set()

    def to_networkx(self) -> nx.Graph:
        graph = nx.Graph()
        graph.add_nodes_from(self.kg.nodes)
        for key, edge in self.kg.edges.items():
            graph.add_edge(*key, element_id=edge.element_id)
        return graph


def compose_query_graph(doc_ids: List[str], kg_dir: str = None) -> ComposedGraph:
    kg_dir = kg_dir or settings.MKGRAG_KG_FOLDER
    ordered = tuple(sorted(set(doc_ids)))
    graphs = []
    segments = {}
    titles = {}
    for doc_id in ordered:
        try:
            stored = load_document_graph(kg_dir, doc_id)
        except GraphNotFoundError as error:
            raise MissingGraphError(doc_id) from error
        graphs.append(stored.kg)
        segments.update(stored.segments)
        titles[doc_id] = stored.title
    return ComposedGraph(
        kg=merge_graphs(graphs, doc_id=""),
        doc_ids=ordered,
        segments=segments,
        titles=titles,
    )


def region_refs(regions: Iterable[RegionAttachment]) -> List[str]:
    return list(dict.fromkeys(ref for region in regions for ref in region.refs))


def entity_content(entity: MMEntity) -> Tuple[str, List[str]]:
    text = " ".join(
        part for part in [entity.name, entity.entity_type, entity.description] if part
    )
    return text, region_refs(entity.regions)


def edge_content(edge: MMEdge) -> Tuple[str, List[str]]:
    text = " ".join(part for part in [edge.source, edge.target, edge.description] if part)
    return text, region_refs(edge.regions)


@dataclass
class ElementRanking:
    seeds: List[ScoredHit] = field(default_factory=list)
    # Query score of every element of the composed graph, keyed by (kind, id)
    scores: Dict[Tuple[str, str], float] = field(default_factory=dict)

    def score(self, kind: str, element_id: str) -> float:
        return self.scores.get((kind, element_id), float("-inf"))

    def rank_of(self, kind: str, element_id: str) -> Optional[int]:
        ordered = sorted(self.scores.items(), key=lambda item: (-item[1], item[0][1], item[0][0]))
        for rank, (key, _) in enumerate(ordered, start=1):
            if key == (kind, element_id):
                return rank
        return None


def score_elements(
    query: Query,
    g: ComposedGraph,
    k_g: int,
    backend: EmbeddingBackend = None,
    query_vector: EmbeddingVector = None,
    dim: int = None,
) -> ElementRanking:
    if not g.kg.nodes:
        return ElementRanking()
    if query_vector is None:
        query_vector = embed_query(query, backend, dim)
    dim = query_vector.dim

    entries = []
    for entity in g.kg.nodes.values():
        text, refs = entity_content(entity)
        entries.append(
            IndexEntry(entity.element_id, ENTITY, embed_text(backend, EVIDENCE, text, refs, dim))
        )
    for edge in g.kg.edges.values():
        text, refs = edge_content(edge)
        entries.append(
            IndexEntry(edge.element_id, EDGE, embed_text(backend, EVIDENCE, text, refs, dim))
        )

    scratch = VectorIndex(dim)
    scratch.upsert(entries)
    ranked = scratch.search_topk(query_vector, (ENTITY, EDGE), len(scratch))
    return ElementRanking(
        seeds=ranked[:k_g],
        scores={hit.key: hit.score for hit in ranked},
    )


@dataclass(frozen=True)
class RetrievedElement:
    kind: str
    element_id: str
    score: float
    hop: int

    @property
    def key(self) -> Tuple[str, str]:
        return self.kind, self.element_id


@dataclass
class RetrievedSubgraph:
    seeds: List[RetrievedElement] = field(default_factory=list)
    # Seeds first, then admitted neighbors in visit order
    expansion: List[RetrievedElement] = field(default_factory=list)
    hops: int = 0

    def node_ids(self) -> set:
        return {e.element_id for e in self.expansion if e.kind == ENTITY}

    def edge_ids(self) -> set:
        return {e.element_id for e in self.expansion if e.kind == EDGE}


def expand_subgraph(
    g: ComposedGraph,
    ranking: ElementRanking,
    hops: int,
    rho: float = None,
) -> RetrievedSubgraph:
    if hops < 0:
        raise RetrievalError(f"hops must be non-negative, got {hops}")
    rho = settings.MKGRAG_RHO if rho is None else rho

    seeds = [RetrievedElement(hit.kind, hit.item_id, hit.score, 0) for hit in ranking.seeds]
    result: Dict[Tuple[str, str], RetrievedElement] = {s.key: s for s in seeds}
    if not seeds or hops == 0:
        return RetrievedSubgraph(seeds=seeds, expansion=list(result.values()), hops=hops)

    s_min = min(seed.score for seed in seeds)
    graph = g.to_networkx()

    def node_score(name):
        return ranking.score(ENTITY, name)

    def visit_order(names):
        return sorted(names, key=lambda name: (-node_score(name), name))

    def admitted(name):
        return rho == 0 or node_score(name) >= rho * s_min

    retained_nodes = {s.element_id for s in seeds if s.kind == ENTITY}
    frontier = set(retained_nodes)
    for seed in seeds:
        if seed.kind == EDGE:
            frontier.update(seed.element_id.split("|", 1))
    frontier = visit_order(frontier)
    expanded = set(frontier)

    for hop in range(1, hops + 1):
        next_frontier = []
        for current in frontier:
            for neighbor in visit_order(graph.neighbors(current)):
                if neighbor in retained_nodes or not admitted(neighbor):
                    continue
                retained_nodes.add(neighbor)
                result[(ENTITY, neighbor)] = RetrievedElement(
                    ENTITY, neighbor, node_score(neighbor), hop
                )
                edge_id = graph.edges[current, neighbor]["element_id"]
                if (EDGE, edge_id) not in result:
                    result[(EDGE, edge_id)] = RetrievedElement(
                        EDGE, edge_id, ranking.score(EDGE, edge_id), hop
                    )
                if neighbor not in expanded:
                    expanded.add(neighbor)
                    next_frontier.append(neighbor)
        frontier = next_frontier
        if not frontier:
            break

    return RetrievedSubgraph(seeds=seeds, expansion=list(result.values()), hops=hops)


@dataclass
class AssembledContext:
    graph_block: str = ""
    segment_block: str = ""
    token_count: int = 0
    segment_ids: List[str] = field(default_factory=list)
    element_ids: List[Tuple[str, str]] = field(default_factory=list)

    @property
    def text(self) -> str:
        return "\n\n".join(block for block in (self.graph_block, self.segment_block) if block)


def _element_line(g: ComposedGraph, element: RetrievedElement) -> str:
    item = g.element(element.kind, element.element_id)
    if element.kind == ENTITY:
        line = f"{item.name} ({item.entity_type}): {item.description}"
    else:
        line = f"{item.source} -> {item.target}: {item.description}"
    return line.rstrip()


def _segment_line(segment: Segment) -> str:
    return f"[{segment.segment_id}] {segment.text}"


def _fill_segments(
    ranked_segments: List[Tuple[str, float]], g: ComposedGraph, remaining: int
) -> Tuple[List[str], List[str], int]:
    lines, kept, used = [], [], 0
    for segment_id, _ in ranked_segments:
        segment = g.segments.get(segment_id)
        if segment is None:
            logger.warning(f"Segment {segment_id} is cited but not stored, skipping")
            continue
        line = _segment_line(segment)
        tokens = count_tokens(line)
        if used + tokens > remaining:
            break
        lines.append(line)
        kept.append(segment_id)
        used += tokens
    return lines, kept, used


def assemble_context(sub: RetrievedSubgraph, g: ComposedGraph, budget: int = None) -> AssembledContext:
    budget = settings.MKGRAG_CONTEXT_BUDGET if budget is None else budget
    if budget < 1:
        raise ContextBudgetError(f"budget must be at least 1, got {budget}")

    seed_keys = {seed.key for seed in sub.seeds}
    lines = {element.key: _element_line(g, element) for element in sub.expansion}
    used = sum(count_tokens(lines[key]) for key in seed_keys)
    if used > budget:
        raise ContextBudgetError("budget below seed outline")

    retained = []
    for element in sub.expansion:
        if element.key in seed_keys:
            retained.append(element)
            continue
        tokens = count_tokens(lines[element.key])
        if used + tokens <= budget:
            retained.append(element)
            used += tokens

    graph_lines = [lines[e.key] for e in retained if e.kind == ENTITY]
    graph_lines += [lines[e.key] for e in retained if e.kind == EDGE]

    segment_scores: Dict[str, float] = {}
    for element in retained:
        item = g.element(element.kind, element.element_id)
        for segment_id in item.source_segments:
            segment_scores[segment_id] = max(
                segment_scores.get(segment_id, float("-inf")), element.score
            )
    ranked_segments = sorted(
        segment_scores.items(), key=lambda item: (-item[1], segment_sort_key(item[0]))
    )
    segment_lines, kept, segment_tokens = _fill_segments(ranked_segments, g, budget - used)

    return AssembledContext(
        graph_block="\n".join(graph_lines),
        segment_block="\n".join(segment_lines),
        token_count=used + segment_tokens,
        segment_ids=kept,
        element_ids=[e.key for e in retained],
    )


def assemble_chunk_context(
    hits: List[ScoredHit], g: ComposedGraph, budget: int = None
) -> AssembledContext:
    budget = settings.MKGRAG_CONTEXT_BUDGET if budget is None else budget
    lines, kept, used = _fill_segments([(hit.item_id, hit.score) for hit in hits], g, budget)
    return AssembledContext(segment_block="\n".join(lines), token_count=used, segment_ids=kept)


@dataclass
class RetrievalResult:
    query: Query
    document_hits: List[ScoredHit]
    context: AssembledContext
    ranking: ElementRanking = field(default_factory=ElementRanking)
    subgraph: RetrievedSubgraph = field(default_factory=RetrievedSubgraph)
    question_text: str = ""
    timings: Dict[str, float] = field(default_factory=dict)

    def document_rank(self, doc_id: str) -> Optional[int]:
        for rank, hit in enumerate(self.document_hits, start=1):
            if hit.item_id == doc_id:
                return rank
        return None


class RetrievalPipeline:
    """All retrieval stages of one configured engine, safe to share across threads."""

    def __init__(
        self,
        index: VectorIndex,
        backend,
        kg_dir: str = None,
        k_d: int = None,
        k_g: int = None,
        hops: int = None,
        rho: float = None,
        budget: int = None,
        mode: str = GRAPH_MODE,
        reformulate: bool = None,
    ):
        if mode not in MODES:
            raise RetrievalError(f"unknown retrieval mode: {mode}")
        self.index = index
        self.backend = backend
        self.kg_dir = kg_dir or settings.MKGRAG_KG_FOLDER
        self.k_d = k_d or settings.MKGRAG_K_D
        self.k_g = k_g or settings.MKGRAG_K_G
        self.hops = settings.MKGRAG_HOPS if hops is None else hops
        self.rho = settings.MKGRAG_RHO if rho is None else rho
        self.budget = budget or settings.MKGRAG_CONTEXT_BUDGET
        self.mode = mode
        self.reformulate = (
            settings.MKGRAG_REFORMULATE_QUESTION if reformulate is None else reformulate
        )

    def retrieve(self, query: Query) -> RetrievalResult:
        timings = {}

        def clock(stage):
            return _timed(timings, stage)

        question_text = query.question
        if self.reformulate:
            with clock("reformulation"):
                question_text = records.reformulate_question(query.question, self.backend)

        with clock("document_retrieval"):
            query_vector = embed_query(query, self.backend, self.index.dim, question_text)
            document_hits = retrieve_documents(
                query, self.k_d, self.index, query_vector=query_vector
            )
        with clock("graph_composition"):
            composed = compose_query_graph([hit.item_id for hit in document_hits], self.kg_dir)

        if self.mode == CHUNK_MODE:
            with clock("chunk_retrieval"):
                candidates = set(composed.doc_ids)
                hits = [
                    hit
                    for hit in self.index.search_topk(
                        query_vector, SEGMENT, max(1, self.index.size(SEGMENT))
                    )
                    if doc_id_of(hit.item_id) in candidates
                ][: self.k_g]
            with clock("assembly"):
                context = assemble_chunk_context(hits, composed, self.budget)
            return RetrievalResult(
                query=query,
                document_hits=document_hits,
                context=context,
                question_text=question_text,
                timings=timings,
            )

        with clock("element_scoring"):
            ranking = score_elements(
                query, composed, self.k_g, self.backend, query_vector=query_vector
            )
        with clock("expansion"):
            subgraph = expand_subgraph(composed, ranking, self.hops, self.rho)
        with clock("assembly"):
            context = assemble_context(subgraph, composed, self.budget)
        logger.debug(
            f"Retrieved {len(subgraph.expansion)} elements and "
            f"{len(context.segment_ids)} segments for '{query.question}'"
        )
        return RetrievalResult(
            query=query,
            document_hits=document_hits,
            context=context,
            ranking=ranking,
            subgraph=subgraph,
            question_text=question_text,
            timings=timings,
        )


@contextmanager
def _timed(timings: Dict[str, float], stage: str):
    start = time.perf_counter()
    try:
        yield
    finally:
        timings[stage] = time.perf_counter() - start
