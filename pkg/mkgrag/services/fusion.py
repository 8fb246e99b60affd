import json
import logging
import os
import urllib.parse
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Set, Tuple

from django.utils import timezone

from mkgrag.services import records
from mkgrag.services.backends import ChatBackend
from mkgrag.services.corpus import (
    ChunkPolicy,
    CorpusHandle,
    Document,
    Segment,
    resolve_images,
    segment_document,
)
from mkgrag.services.records import MatchRecord, RecordBatch
from mkgrag.services.scenegraph import (
    BBox,
    VisualGraph,
    bbox_union,
    load_scene_graph,
    scene_graph_path,
)
from mkgrag.utils import write_json

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

EdgeKey = Tuple[str, str]


class FusionError(Exception):
    pass


class GraphNotFoundError(FusionError):
    def __init__(self, doc_id: str, path: str):
        super().__init__(f"no knowledge graph for document {doc_id} at {path}")
        self.doc_id = doc_id


def segment_sort_key(segment_id: str):
    doc_id, _, position = segment_id.rpartition("#")
    return (doc_id, int(position)) if position.isdigit() else (segment_id, -1)


def doc_id_of(segment_id: str) -> str:
    return segment_id.rpartition("#")[0] or segment_id


def edge_key(a: str, b: str) -> EdgeKey:
    return (a, b) if a <= b else (b, a)


@dataclass(frozen=True)
class Description:
    text: str
    segment_id: str
    # Original orientation of the relationship record, edges only
    source: Optional[str] = None
    target: Optional[str] = None

    def sort_key(self):
        return (segment_sort_key(self.segment_id), self.text, self.source or "")


@dataclass(frozen=True)
class RegionAttachment:
    image_id: str
    region: Optional[BBox]
    strength: float

    @property
    def is_whole_image(self) -> bool:
        return self.region is None

    @property
    def key(self):
        return (self.image_id, self.region.as_tuple() if self.region else None)

    def sort_key(self):
        return (self.image_id, (0,) if self.region is None else (1,) + self.region.as_tuple())

    @property
    def refs(self) -> Tuple[str, ...]:
        # Tokens handed to embedders: the image id, plus the box for region attachments
        if self.region is None:
            return (self.image_id,)
        return (self.image_id, f"{self.image_id}@" + ",".join(f"{v:.2f}" for v in self.region.as_tuple()))


def _merge_descriptions(*groups: Iterable[Description]) -> List[Description]:
    by_text: Dict[str, Description] = {}
    for group in groups:
        for description in group:
            kept = by_text.get(description.text)
            if kept is None or description.sort_key() < kept.sort_key():
                by_text[description.text] = description
    return sorted(by_text.values(), key=Description.sort_key)


def _merge_regions(*groups: Iterable[RegionAttachment]) -> List[RegionAttachment]:
    by_key: Dict[tuple, RegionAttachment] = {}
    for group in groups:
        for region in group:
            kept = by_key.get(region.key)
            if kept is None or region.strength > kept.strength:
                by_key[region.key] = region
    return sorted(by_key.values(), key=RegionAttachment.sort_key)


@dataclass
class MMEntity:
    name: str
    entity_type: str = ""
    descriptions: List[Description] = field(default_factory=list)
    regions: List[RegionAttachment] = field(default_factory=list)
    source_segments: Set[str] = field(default_factory=set)

    @property
    def element_id(self) -> str:
        return self.name

    @property
    def doc_ids(self) -> Set[str]:
        return {doc_id_of(segment_id) for segment_id in self.source_segments}

    @property
    def description(self) -> str:
        return " ".join(d.text for d in self.descriptions)

    def merged(self, other: "MMEntity") -> "MMEntity":
        types = [t for t in (self.entity_type, other.entity_type) if t]
        return MMEntity(
            name=self.name,
            entity_type=min(types) if types else "",
            descriptions=_merge_descriptions(self.descriptions, other.descriptions),
            regions=_merge_regions(self.regions, other.regions),
            source_segments=self.source_segments | other.source_segments,
        )


@dataclass
class MMEdge:
    endpoint_key: EdgeKey
    descriptions: List[Description] = field(default_factory=list)
    strength: float = 0.0
    regions: List[RegionAttachment] = field(default_factory=list)
    source_segments: Set[str] = field(default_factory=set)

    @property
    def element_id(self) -> str:
        return "|".join(self.endpoint_key)

    @property
    def doc_ids(self) -> Set[str]:
        return {doc_id_of(segment_id) for segment_id in self.source_segments}

    @property
    def source(self) -> str:
        first = self.descriptions[0] if self.descriptions else None
        return first.source if first and first.source else self.endpoint_key[0]

    @property
    def target(self) -> str:
        first = self.descriptions[0] if self.descriptions else None
        return first.target if first and first.target else self.endpoint_key[1]

    @property
    def description(self) -> str:
        return " ".join(d.text for d in self.descriptions)

    def merged(self, other: "MMEdge") -> "MMEdge":
        return MMEdge(
            endpoint_key=self.endpoint_key,
            descriptions=_merge_descriptions(self.descriptions, other.descriptions),
            strength=max(self.strength, other.strength),
            regions=_merge_regions(self.regions, other.regions),
            source_segments=self.source_segments | other.source_segments,
        )


@dataclass
class MultimodalKG:
    doc_id: str
    nodes: Dict[str, MMEntity] = field(default_factory=dict)
    edges: Dict[EdgeKey, MMEdge] = field(default_factory=dict)
    # Bookkeeping of what was dropped while building the graph
    dangling: int = 0
    drops: List[str] = field(default_factory=list)

    def add_node(self, node: MMEntity):
        existing = self.nodes.get(node.name)
        self.nodes[node.name] = existing.merged(node) if existing else node

    def add_edge(self, edge: MMEdge):
        a, b = edge.endpoint_key
        if a not in self.nodes or b not in self.nodes:
            raise FusionError(f"edge {a} - {b} has an endpoint outside the graph")
        existing = self.edges.get(edge.endpoint_key)
        self.edges[edge.endpoint_key] = existing.merged(edge) if existing else edge

    def copy(self) -> "MultimodalKG":
        return MultimodalKG(
            doc_id=self.doc_id,
            nodes={name: replace(node, regions=list(node.regions), source_segments=set(node.source_segments))
                   for name, node in self.nodes.items()},
            edges={key: replace(edge, regions=list(edge.regions), source_segments=set(edge.source_segments))
                   for key, edge in self.edges.items()},
            dangling=self.dangling,
            drops=list(self.drops),
        )


def build_textual_subgraph(batch: RecordBatch, segment_id: str) -> MultimodalKG:
    fragment = MultimodalKG(doc_id=doc_id_of(segment_id))
    for entity in batch.entities:
        fragment.add_node(
            MMEntity(
                name=entity.name,
                entity_type=entity.entity_type,
                descriptions=[Description(entity.description, segment_id)],
                source_segments={segment_id},
            )
        )
    for relationship in batch.relationships:
        missing = [
            name
            for name in (relationship.source, relationship.target)
            if name not in fragment.nodes
        ]
        if missing:
            fragment.dangling += 1
            fragment.drops.append(
                f"relationship {relationship.source} -> {relationship.target}: "
                f"missing endpoint {', '.join(missing)}"
            )
            continue
        fragment.add_edge(
            MMEdge(
                endpoint_key=edge_key(relationship.source, relationship.target),
                descriptions=[
                    Description(
                        relationship.description,
                        segment_id,
                        source=relationship.source,
                        target=relationship.target,
                    )
                ],
                strength=relationship.strength,
                source_segments={segment_id},
            )
        )
    if fragment.dangling:
        logger.warning(
            f"Dropped {fragment.dangling} dangling relationships in segment {segment_id}"
        )
    return fragment


def apply_matchings(
    frag: MultimodalKG, matches: List[MatchRecord], vg: VisualGraph
) -> MultimodalKG:
    result = frag.copy()
    for match in matches:
        reason = _apply_matching(result, match, vg)
        if reason:
            result.drops.append(reason)
            logger.warning(f"Dropped match on image {vg.image_id}: {reason}")
    return result


def _apply_matching(kg: MultimodalKG, match: MatchRecord, vg: VisualGraph):
    if isinstance(match, records.ImageMatch):
        node = kg.nodes.get(match.entity_name)
        if node is None:
            return f"unknown entity {match.entity_name}"
        attachment = RegionAttachment(vg.image_id, None, match.strength)
        node.regions = _merge_regions(node.regions, [attachment])
        return None

    if isinstance(match, records.ObjectMatch):
        visual_object = vg.get_object(match.object_id)
        if visual_object is None:
            return f"unknown object {match.object_id}"
        node = kg.nodes.get(match.entity_name)
        if node is None:
            return f"unknown entity {match.entity_name}"
        attachment = RegionAttachment(vg.image_id, visual_object.bbox, match.strength)
        node.regions = _merge_regions(node.regions, [attachment])
        return None

    relation = vg.get_relation(match.relation_id)
    if relation is None:
        return f"unknown relation {match.relation_id}"
    edge = kg.edges.get(edge_key(match.source_entity, match.target_entity))
    if edge is None:
        return f"unknown relationship {match.source_entity} - {match.target_entity}"
    region = bbox_union(
        vg.get_object(relation.subject_id).bbox, vg.get_object(relation.object_id).bbox
    )
    attachment = RegionAttachment(vg.image_id, region, match.strength)
    edge.regions = _merge_regions(edge.regions, [attachment])
    return None


def merge_graphs(graphs: Iterable[MultimodalKG], doc_id: str) -> MultimodalKG:
    merged = MultimodalKG(doc_id=doc_id)
    graphs = list(graphs)
    for graph in graphs:
        for node in graph.nodes.values():
            merged.add_node(node)
    for graph in graphs:
        for edge in graph.edges.values():
            merged.add_edge(edge)
        merged.dangling += graph.dangling
        merged.drops.extend(graph.drops)
    return merged


def aggregate_document_graph(fragments: List[MultimodalKG], doc_id: str) -> MultimodalKG:
    for fragment in fragments:
        if fragment.doc_id != doc_id:
            raise FusionError(
                f"fragment of document {fragment.doc_id} can not be merged into {doc_id}"
            )
    return merge_graphs(fragments, doc_id)


# Serialization


def _region_to_dict(region: RegionAttachment) -> dict:
    return {
        "image_id": region.image_id,
        "bbox": list(region.region.as_tuple()) if region.region else None,
        "strength": region.strength,
    }


def _region_from_dict(data: dict) -> RegionAttachment:
    return RegionAttachment(
        image_id=data["image_id"],
        region=BBox(*data["bbox"]) if data.get("bbox") else None,
        strength=float(data["strength"]),
    )


def _description_to_dict(description: Description) -> dict:
    data = {"text": description.text, "segment_id": description.segment_id}
    if description.source:
        data["source"] = description.source
        data["target"] = description.target
    return data


def kg_to_dict(kg: MultimodalKG) -> dict:
    return {
        "doc_id": kg.doc_id,
        "nodes": [
            {
                "name": node.name,
                "entity_type": node.entity_type,
                "descriptions": [
                    _description_to_dict(d)
                    for d in sorted(node.descriptions, key=Description.sort_key)
                ],
                "regions": [
                    _region_to_dict(r)
                    for r in sorted(node.regions, key=RegionAttachment.sort_key)
                ],
                "source_segments": sorted(node.source_segments, key=segment_sort_key),
            }
            for node in sorted(kg.nodes.values(), key=lambda n: n.name)
        ],
        "edges": [
            {
                "endpoints": list(edge.endpoint_key),
                "strength": edge.strength,
                "descriptions": [
                    _description_to_dict(d)
                    for d in sorted(edge.descriptions, key=Description.sort_key)
                ],
                "regions": [
                    _region_to_dict(r)
                    for r in sorted(edge.regions, key=RegionAttachment.sort_key)
                ],
                "source_segments": sorted(edge.source_segments, key=segment_sort_key),
            }
            for edge in sorted(kg.edges.values(), key=lambda e: e.endpoint_key)
        ],
    }


def kg_from_dict(data: dict) -> MultimodalKG:
    kg = MultimodalKG(doc_id=data["doc_id"])
    for node in data.get("nodes", []):
        kg.add_node(
            MMEntity(
                name=node["name"],
                entity_type=node.get("entity_type", ""),
                descriptions=[Description(**d) for d in node.get("descriptions", [])],
                regions=[_region_from_dict(r) for r in node.get("regions", [])],
                source_segments=set(node.get("source_segments", [])),
            )
        )
    for edge in data.get("edges", []):
        kg.add_edge(
            MMEdge(
                endpoint_key=edge_key(*edge["endpoints"]),
                descriptions=[Description(**d) for d in edge.get("descriptions", [])],
                strength=float(edge.get("strength", 0.0)),
                regions=[_region_from_dict(r) for r in edge.get("regions", [])],
                source_segments=set(edge.get("source_segments", [])),
            )
        )
    return kg


def canonical_serialization(kg: MultimodalKG) -> str:
    data = kg_to_dict(kg)
    data.pop("doc_id")
    return json.dumps(data, sort_keys=True, ensure_ascii=False)


@dataclass
class StoredDocumentGraph:
    kg: MultimodalKG
    title: str = ""
    segments: Dict[str, Segment] = field(default_factory=dict)


def graph_path(directory: str, doc_id: str) -> str:
    return os.path.join(directory, urllib.parse.quote(doc_id, safe="") + ".json")


def save_document_graph(
    kg: MultimodalKG, segments: List[Segment], directory: str, title: str = ""
) -> str:
    path = graph_path(directory, kg.doc_id)
    data = {
        "schema_version": SCHEMA_VERSION,
        "title": title,
        "segments": [
            {
                "segment_id": segment.segment_id,
                "text": segment.text,
                "image_ids": list(segment.image_ids),
                "source_sections": list(segment.source_sections),
            }
            for segment in segments
        ],
        **kg_to_dict(kg),
    }
    write_json(path, data)
    return path


def load_document_graph(directory: str, doc_id: str) -> StoredDocumentGraph:
    path = graph_path(directory, doc_id)
    if not os.path.exists(path):
        raise GraphNotFoundError(doc_id, path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as error:
        raise FusionError(f"could not read knowledge graph {path}: {error}") from error
    segments = {
        s["segment_id"]: Segment(
            doc_id=data["doc_id"],
            segment_id=s["segment_id"],
            text=s["text"],
            image_ids=tuple(s.get("image_ids", [])),
            source_sections=tuple(s.get("source_sections", [])),
        )
        for s in data.get("segments", [])
    }
    return StoredDocumentGraph(
        kg=kg_from_dict(data), title=data.get("title", ""), segments=segments
    )


def list_document_graphs(directory: str) -> List[str]:
    if not os.path.isdir(directory):
        return []
    return sorted(
        urllib.parse.unquote(name[: -len(".json")])
        for name in os.listdir(directory)
        if name.endswith(".json")
    )


# Offline construction pipeline


def build_segment_fragment(
    segment: Segment, corpus: CorpusHandle, backend: ChatBackend, seed: int = 0
) -> MultimodalKG:
    batch = records.extract_textual_graph(segment.text, backend, seed=seed)
    fragment = build_textual_subgraph(batch, segment.segment_id)
    document = corpus.get(segment.doc_id)
    for image in resolve_images(segment, corpus):
        path = scene_graph_path(corpus.corpus_dir, document.doc_id, image)
        vg = load_scene_graph(path, image.image_id)
        matching = records.match_image(image, batch.textual_graph, vg, backend, seed=seed)
        fragment = apply_matchings(fragment, matching.matches, vg)
    return fragment


def build_document_graph(
    doc: Document,
    corpus: CorpusHandle,
    backend: ChatBackend,
    policy: ChunkPolicy = None,
    parallelism: int = 1,
    seed: int = 0,
) -> Tuple[MultimodalKG, List[Segment]]:
    start = timezone.now()
    policy = policy or ChunkPolicy.from_settings()
    segments = segment_document(doc, policy)

    def build(segment):
        return build_segment_fragment(segment, corpus, backend, seed=seed)

    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as executor:
            fragments = list(executor.map(build, segments))
    else:
        fragments = [build(segment) for segment in segments]

    kg = aggregate_document_graph(fragments, doc.doc_id)
    end = timezone.now()
    logger.debug(
        f"Built graph for {doc.doc_id}: {len(kg.nodes)} nodes, {len(kg.edges)} edges, "
        f"{len(segments)} segments in {end - start}"
    )
    return kg, segments
