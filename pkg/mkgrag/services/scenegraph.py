import json
import logging
import os
import re
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

from mkgrag.api.serializers import (
    VisualObjectSerializer,
    VisualRelationSerializer,
    format_errors,
)

logger = logging.getLogger(__name__)

_object_id_pattern = re.compile(r"^<?object-(\d+)>?$")
_relation_id_pattern = re.compile(r"^<?relation-(\d+)>?$")


class SceneGraphError(Exception):
    pass


@dataclass(frozen=True, order=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        reason = bbox_violation(self.x1, self.y1, self.x2, self.y2)
        if reason:
            raise SceneGraphError(f"invalid bbox {self.as_tuple()}: {reason}")

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return self.x1, self.y1, self.x2, self.y2

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def contains(self, other: "BBox") -> bool:
        return (
            self.x1 <= other.x1
            and self.y1 <= other.y1
            and self.x2 >= other.x2
            and self.y2 >= other.y2
        )

    def render(self) -> str:
        return "(" + ", ".join(format_coordinate(v) for v in self.as_tuple()) + ")"


def bbox_violation(x1, y1, x2, y2) -> Optional[str]:
    for value in (x1, y1, x2, y2):
        if not (0.0 <= value <= 1.0):
            return "coordinate out of range"
    if x1 > x2:
        return "x1 > x2"
    if y1 > y2:
        return "y1 > y2"
    return None


def format_coordinate(value: float) -> str:
    # 2 decimals without trailing zeros, but always one decimal: 0.8, 1.0, 0.06
    text = f"{value:.2f}".rstrip("0")
    return text + "0" if text.endswith(".") else text


def bbox_union(a: BBox, b: BBox) -> BBox:
    return BBox(
        x1=min(a.x1, b.x1),
        y1=min(a.y1, b.y1),
        x2=max(a.x2, b.x2),
        y2=max(a.y2, b.y2),
    )


@dataclass(frozen=True)
class VisualObject:
    object_id: str
    category: str
    bbox: BBox


@dataclass(frozen=True)
class VisualRelation:
    relation_id: str
    subject_id: str
    predicate: str
    object_id: str


@dataclass
class VisualGraph:
    image_id: str
    objects: List[VisualObject] = field(default_factory=list)
    relations: List[VisualRelation] = field(default_factory=list)
    drops: List[Tuple[str, str]] = field(default_factory=list)

    def get_object(self, object_id: str) -> Optional[VisualObject]:
        return next((o for o in self.objects if o.object_id == object_id), None)

    def get_relation(self, relation_id: str) -> Optional[VisualRelation]:
        return next((r for r in self.relations if r.relation_id == relation_id), None)


def normalize_object_id(value) -> Optional[str]:
    match = _object_id_pattern.match(str(value).strip())
    return f"<object-{int(match.group(1))}>" if match else None


def normalize_relation_id(value) -> Optional[str]:
    match = _relation_id_pattern.match(str(value).strip())
    return f"<relation-{int(match.group(1))}>" if match else None


def ingest_scene_graph(raw: str, image_id: str) -> VisualGraph:
    graph = VisualGraph(image_id=image_id)
    if not raw or not raw.strip():
        return graph

    try:
        data = json.loads(raw)
    except json.JSONDecodeError as error:
        raise SceneGraphError(
            f"unreadable scene graph for {image_id}: {error.msg}"
        ) from error
    if not isinstance(data, dict):
        raise SceneGraphError(f"unreadable scene graph for {image_id}: expected an object")

    for raw_object in data.get("objects") or []:
        _ingest_object(graph, raw_object)
    for raw_relation in data.get("relations") or []:
        _ingest_relation(graph, raw_relation)

    for item, reason in graph.drops:
        logger.warning(f"Dropped scene graph item {item} of image {image_id}: {reason}")
    return graph


def _ingest_object(graph: VisualGraph, raw_object):
    serializer = VisualObjectSerializer(data=raw_object)
    if not serializer.is_valid():
        graph.drops.append((str(raw_object), format_errors(serializer.errors)))
        return
    attrs = serializer.validated_data
    object_id = normalize_object_id(attrs["id"])
    if object_id is None:
        graph.drops.append((attrs["id"], "invalid object id"))
        return
    if graph.get_object(object_id):
        graph.drops.append((object_id, "duplicate object id"))
        return
    reason = bbox_violation(*attrs["bbox"])
    if reason:
        graph.drops.append((object_id, reason))
        return
    graph.objects.append(
        VisualObject(
            object_id=object_id,
            category=attrs["category"].strip(),
            bbox=BBox(*attrs["bbox"]),
        )
    )


def _ingest_relation(graph: VisualGraph, raw_relation):
    serializer = VisualRelationSerializer(data=raw_relation)
    if not serializer.is_valid():
        graph.drops.append((str(raw_relation), format_errors(serializer.errors)))
        return
    attrs = serializer.validated_data
    relation_id = normalize_relation_id(attrs["id"])
    if relation_id is None:
        graph.drops.append((attrs["id"], "invalid relation id"))
        return
    if graph.get_relation(relation_id):
        graph.drops.append((relation_id, "duplicate relation id"))
        return
    subject_id = normalize_object_id(attrs["subject"])
    object_id = normalize_object_id(attrs["object"])
    if subject_id is None or graph.get_object(subject_id) is None:
        graph.drops.append((relation_id, f"unknown subject {attrs['subject']}"))
        return
    if object_id is None or graph.get_object(object_id) is None:
        graph.drops.append((relation_id, f"unknown object {attrs['object']}"))
        return
    if subject_id == object_id:
        graph.drops.append((relation_id, "subject equals object"))
        return
    graph.relations.append(
        VisualRelation(
            relation_id=relation_id,
            subject_id=subject_id,
            predicate=attrs["predicate"].strip(),
            object_id=object_id,
        )
    )


def load_scene_graph(path: str, image_id: str) -> VisualGraph:
    if not path or not os.path.exists(path):
        logger.warning(f"No scene graph for image {image_id} at {path}")
        return VisualGraph(image_id=image_id)
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = f.read()
    except OSError as error:
        raise SceneGraphError(f"could not read scene graph {path}: {error}") from error
    return ingest_scene_graph(raw, image_id)


def scene_graph_path(corpus_dir: str, doc_id: str, image) -> str:
    if image.scene_graph:
        if os.path.isabs(image.scene_graph):
            return image.scene_graph
        return os.path.join(corpus_dir, image.scene_graph)
    return os.path.join(corpus_dir, "scene_graphs", doc_id, f"{image.image_id}.json")


def render_scene_graph_block(vg: VisualGraph) -> str:
    lines = [
        f"- {visual_object.object_id}: {visual_object.category}, {visual_object.bbox.render()}"
        for visual_object in vg.objects
    ]
    lines.extend(
        f"- {relation.relation_id}: {relation.subject_id} {relation.predicate} {relation.object_id}"
        for relation in vg.relations
    )
    return "\n".join(lines)
