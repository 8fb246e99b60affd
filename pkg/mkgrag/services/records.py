"""
Delimiter-record grammar shared with the extraction and matching models.

    ("entity"|<name>|<type>|<description>)
    ("relationship"|<source>|<target>|<description>|<strength>)
    ("matching"|<image>|<entity>|<strength>)
    ("matching"|<object-k>|<entity>|<strength>)
    ("matching"|<relation-k>|<source>|<target>|<strength>)

The parser is total: anything that is not a record frame is ignored, invalid
records are collected as rejects with a reason.
"""

import logging
import os
import re
from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, Optional, Union

from django.conf import settings

from mkgrag.services.backends import ChatBackend, ChatRequest, Part
from mkgrag.services.scenegraph import (
    VisualGraph,
    normalize_object_id,
    normalize_relation_id,
    render_scene_graph_block,
)
from mkgrag.utils import normalize_whitespace

logger = logging.getLogger(__name__)

IMAGE_ID = "<image>"

_record_frame = re.compile(r"^\((.*)\)$", re.DOTALL)
_record_separator = re.compile(r"(?<=\))\s*##\s*")
_placeholder = re.compile(r"(\{[A-Z_]+\})")
_tag_quotes = "`'\"“”‘’ "

ENTITY_TAGS = ("entity",)
RELATIONSHIP_TAGS = ("relationship", "relation")
MATCHING_TAGS = ("matching", "mapping")


class RecordsError(Exception):
    pass


@dataclass(frozen=True)
class TextualEntity:
    name: str
    entity_type: str
    description: str


@dataclass(frozen=True)
class TextualRelationship:
    source: str
    target: str
    description: str
    strength: float


@dataclass(frozen=True)
class ImageMatch:
    entity_name: str
    strength: float


@dataclass(frozen=True)
class ObjectMatch:
    object_id: str
    entity_name: str
    strength: float


@dataclass(frozen=True)
class RelationMatch:
    relation_id: str
    source_entity: str
    target_entity: str
    strength: float


MatchRecord = Union[ImageMatch, ObjectMatch, RelationMatch]


@dataclass(frozen=True)
class RecordReject:
    raw_line: str
    reason: str


@dataclass
class TextualGraph:
    entities: List[TextualEntity] = field(default_factory=list)
    relationships: List[TextualRelationship] = field(default_factory=list)


@dataclass
class RecordBatch:
    entities: List[TextualEntity] = field(default_factory=list)
    relationships: List[TextualRelationship] = field(default_factory=list)
    matches: List[MatchRecord] = field(default_factory=list)
    rejects: List[RecordReject] = field(default_factory=list)

    @property
    def textual_graph(self) -> TextualGraph:
        return TextualGraph(
            entities=list(self.entities), relationships=list(self.relationships)
        )

    @property
    def dangling(self) -> List[RecordReject]:
        return [r for r in self.rejects if r.reason.startswith("dangling endpoint")]


def canonical_name(name: str) -> str:
    return normalize_whitespace(name).upper()


def _parse_strength(value: str) -> float:
    strength = float(value.strip())
    if strength != strength or strength in (float("inf"), float("-inf")):
        raise ValueError("not a finite number")
    return strength


def _candidate_lines(raw: str):
    for line in raw.replace("<|COMPLETE|>", "").splitlines():
        line = line.strip()
        if line.startswith("- "):
            line = line[2:].strip()
        for candidate in _record_separator.split(line):
            candidate = candidate.strip()
            if candidate:
                yield candidate


def parse_records(raw: Union[str, bytes]) -> RecordBatch:
    if isinstance(raw, bytes):
        raw = raw.decode("utf-8", errors="replace")
    batch = RecordBatch()
    if not raw:
        return batch

    for line in _candidate_lines(raw):
        frame = _record_frame.match(line)
        if not frame:
            continue
        inner = frame.group(1).replace("<|>", "|")
        fields = [normalize_whitespace(value) for value in inner.split("|")]
        tag = fields[0].strip(_tag_quotes).lower()
        if tag in ENTITY_TAGS:
            _parse_entity(batch, line, fields[1:])
        elif tag in RELATIONSHIP_TAGS:
            _parse_relationship(batch, line, fields[1:])
        elif tag in MATCHING_TAGS:
            _parse_matching(batch, line, fields[1:])
        else:
            batch.rejects.append(RecordReject(line, f"unknown record type: {tag}"))

    names = {entity.name for entity in batch.entities}
    for relationship in batch.relationships:
        for endpoint in (relationship.source, relationship.target):
            if endpoint not in names:
                batch.rejects.append(
                    RecordReject(
                        serialize_relationship(relationship),
                        f"dangling endpoint: {endpoint}",
                    )
                )

    for reject in batch.rejects:
        logger.debug(f"Record rejected ({reject.reason}): {reject.raw_line[:100]}")
    return batch


def _parse_entity(batch: RecordBatch, line: str, fields: List[str]):
    if len(fields) != 3:
        batch.rejects.append(RecordReject(line, "wrong field count for entity"))
        return
    name = canonical_name(fields[0])
    if not name:
        batch.rejects.append(RecordReject(line, "empty entity name"))
        return
    batch.entities.append(
        TextualEntity(name=name, entity_type=fields[1], description=fields[2])
    )


def _parse_relationship(batch: RecordBatch, line: str, fields: List[str]):
    if len(fields) != 4:
        batch.rejects.append(RecordReject(line, "wrong field count for relationship"))
        return
    source, target = canonical_name(fields[0]), canonical_name(fields[1])
    if not source or not target:
        batch.rejects.append(RecordReject(line, "empty relationship endpoint"))
        return
    if source == target:
        batch.rejects.append(RecordReject(line, "source equals target"))
        return
    strength = _checked_strength(batch, line, fields[3])
    if strength is None:
        return
    batch.relationships.append(
        TextualRelationship(
            source=source, target=target, description=fields[2], strength=strength
        )
    )


def _parse_matching(batch: RecordBatch, line: str, fields: List[str]):
    if len(fields) < 3:
        batch.rejects.append(RecordReject(line, "wrong field count for matching"))
        return
    element_id = fields[0].replace(" ", "")
    if element_id.lower() == IMAGE_ID and len(fields) == 3:
        strength = _checked_strength(batch, line, fields[2])
        if strength is not None:
            batch.matches.append(ImageMatch(canonical_name(fields[1]), strength))
        return

    object_id = normalize_object_id(element_id)
    if object_id and element_id.startswith("<") and len(fields) == 3:
        strength = _checked_strength(batch, line, fields[2])
        if strength is not None:
            batch.matches.append(
                ObjectMatch(object_id, canonical_name(fields[1]), strength)
            )
        return

    relation_id = normalize_relation_id(element_id)
    if relation_id and element_id.startswith("<") and len(fields) == 4:
        strength = _checked_strength(batch, line, fields[3])
        if strength is not None:
            batch.matches.append(
                RelationMatch(
                    relation_id,
                    canonical_name(fields[1]),
                    canonical_name(fields[2]),
                    strength,
                )
            )
        return

    batch.rejects.append(RecordReject(line, f"invalid match id: {fields[0]}"))


def _checked_strength(batch: RecordBatch, line: str, value: str) -> Optional[float]:
    try:
        strength = _parse_strength(value)
    except ValueError:
        batch.rejects.append(RecordReject(line, "invalid strength"))
        return None
    if not (0.0 <= strength <= 10.0):
        batch.rejects.append(RecordReject(line, "strength out of range"))
        return None
    return strength


def format_strength(strength: float) -> str:
    value = float(strength)
    return str(int(value)) if value.is_integer() else repr(value)


def serialize_entity(entity: TextualEntity) -> str:
    return f'("entity"|{entity.name}|{entity.entity_type}|{entity.description})'


def serialize_relationship(relationship: TextualRelationship) -> str:
    return (
        f'("relationship"|{relationship.source}|{relationship.target}'
        f"|{relationship.description}|{format_strength(relationship.strength)})"
    )


def serialize_match(match: MatchRecord) -> str:
    strength = format_strength(match.strength)
    if isinstance(match, ImageMatch):
        return f'("matching"|{IMAGE_ID}|{match.entity_name}|{strength})'
    if isinstance(match, ObjectMatch):
        return f'("matching"|{match.object_id}|{match.entity_name}|{strength})'
    return (
        f'("matching"|{match.relation_id}|{match.source_entity}'
        f"|{match.target_entity}|{strength})"
    )


def serialize_records(batch: RecordBatch) -> str:
    lines = [serialize_entity(entity) for entity in batch.entities]
    lines.extend(serialize_relationship(r) for r in batch.relationships)
    lines.extend(serialize_match(match) for match in batch.matches)
    return "\n".join(lines)


# Prompts


@dataclass
class PromptParts:
    parts: List[Part] = field(default_factory=list)

    @property
    def text(self) -> str:
        return "".join(part.text for part in self.parts if part.is_text)

    @property
    def images(self) -> List[str]:
        return [part.image for part in self.parts if not part.is_text]


@lru_cache(maxsize=32)
def _read_template(path: str) -> str:
    with open(path, "r", encoding="utf-8") as f:
        return f.read()


def load_template(name: str) -> str:
    path = os.path.join(settings.MKGRAG_PROMPT_FOLDER, f"{name}.txt")
    try:
        return _read_template(path)
    except OSError as error:
        raise RecordsError(f"missing prompt template {path}") from error


def render_template(name: str, values: dict) -> PromptParts:
    """
    Substitutes {PLACEHOLDER}s of a template. A Part value (an image) splits
    the surrounding text into separate text parts.
    """
    prompt = PromptParts()
    buffer = []

    def flush():
        text = "".join(buffer)
        if text.strip():
            prompt.parts.append(Part.of_text(text))
        buffer.clear()

    for piece in _placeholder.split(load_template(name)):
        key = piece[1:-1] if _placeholder.fullmatch(piece) else None
        if key is None or key not in values:
            buffer.append(piece)
            continue
        value = values[key]
        if isinstance(value, Part):
            flush()
            prompt.parts.append(value)
        else:
            buffer.append(str(value))
    flush()
    return prompt


def render_textual_graph_block(tg: TextualGraph) -> str:
    lines = [serialize_entity(entity) for entity in tg.entities]
    lines.extend(serialize_relationship(r) for r in tg.relationships)
    return "\n".join(lines)


def default_matching_exemplars() -> List[str]:
    return [load_template("match_example").strip()]


def render_matching_prompt(image, tg: TextualGraph, vg: VisualGraph, exemplars: List[str]) -> PromptParts:
    return render_template(
        "match",
        {
            "PREFIX": load_template("match_prefix").strip(),
            "IMAGE": Part.of_image(image.uri or image.image_id),
            "TEXT_GRAPH": render_textual_graph_block(tg),
            "SCENE_GRAPH": render_scene_graph_block(vg),
            "EXEMPLARS": "\n\n".join(exemplars),
        },
    )


def render_extraction_prompt(segment_text: str, exemplars: List[str] = ()) -> PromptParts:
    return render_template(
        "extract", {"TEXT": segment_text, "EXEMPLARS": "\n\n".join(exemplars)}
    )


def extract_textual_graph(segment_text: str, backend: ChatBackend, seed: int = 0) -> RecordBatch:
    prompt = render_extraction_prompt(segment_text)
    raw = backend.chat_complete(
        ChatRequest(template_id="extract", parts=tuple(prompt.parts), seed=seed)
    )
    batch = parse_records(raw)
    # Matching records are not expected from the extractor
    batch.matches = []
    return batch


def match_image(
    image,
    tg: TextualGraph,
    vg: VisualGraph,
    backend: ChatBackend,
    exemplars: List[str] = None,
    seed: int = 0,
) -> RecordBatch:
    if exemplars is None:
        exemplars = default_matching_exemplars()
    prompt = render_matching_prompt(image, tg, vg, exemplars)
    raw = backend.chat_complete(
        ChatRequest(template_id="match", parts=tuple(prompt.parts), seed=seed)
    )
    batch = parse_records(raw)
    return RecordBatch(matches=batch.matches, rejects=batch.rejects)


def reformulate_question(q: str, backend: ChatBackend, seed: int = 0) -> str:
    if not q or not q.strip():
        raise RecordsError("empty question")
    prompt = render_template("reformulate", {"QUESTION": q.strip()})
    raw = backend.chat_complete(
        ChatRequest(template_id="reformulate", parts=tuple(prompt.parts), seed=seed)
    )
    return raw.strip()
