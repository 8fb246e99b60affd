import json
import logging
import os
from dataclasses import dataclass, field
from typing import Iterator, List, Optional

from django.conf import settings

from mkgrag.api.serializers import DocumentSerializer, format_errors
from mkgrag.utils import count_tokens, normalize_whitespace, split_sentences

logger = logging.getLogger(__name__)


class CorpusError(Exception):
    pass


class DanglingImageRefError(CorpusError):
    def __init__(self, image_id: str):
        super().__init__(f"dangling image ref: {image_id}")
        self.image_id = image_id


@dataclass(frozen=True)
class ImageAsset:
    image_id: str
    uri: str = ""
    caption: Optional[str] = None
    scene_graph: Optional[str] = None


@dataclass(frozen=True)
class Section:
    heading: str
    text: str
    image_ids: tuple = ()


@dataclass(frozen=True)
class Document:
    doc_id: str
    title: str
    sections: tuple
    images: tuple

    def get_image(self, image_id: str) -> Optional[ImageAsset]:
        return next((i for i in self.images if i.image_id == image_id), None)


@dataclass(frozen=True)
class Segment:
    doc_id: str
    segment_id: str
    text: str
    image_ids: tuple = ()
    source_sections: tuple = ()

    @property
    def token_count(self) -> int:
        return count_tokens(self.text)


@dataclass(frozen=True)
class ChunkPolicy:
    max_tokens: int = 512
    min_tokens: int = 64
    include_headings: bool = True

    def __post_init__(self):
        if not (self.max_tokens >= self.min_tokens >= 1):
            raise CorpusError(
                f"invalid chunk policy: max_tokens={self.max_tokens}, min_tokens={self.min_tokens}"
            )

    @classmethod
    def from_settings(cls):
        return cls(
            max_tokens=settings.MKGRAG_CHUNK_MAX_TOKENS,
            min_tokens=settings.MKGRAG_CHUNK_MIN_TOKENS,
            include_headings=settings.MKGRAG_CHUNK_INCLUDE_HEADINGS,
        )


@dataclass(frozen=True)
class CorpusReject:
    line_number: int
    reason: str
    doc_id: Optional[str] = None


@dataclass
class CorpusHandle:
    documents: List[Document] = field(default_factory=list)
    rejects: List[CorpusReject] = field(default_factory=list)
    corpus_dir: str = ""

    def __post_init__(self):
        self._by_id = {document.doc_id: document for document in self.documents}

    def __iter__(self) -> Iterator[Document]:
        return iter(self.documents)

    def __len__(self):
        return len(self.documents)

    def get(self, doc_id: str) -> Document:
        try:
            return self._by_id[doc_id]
        except KeyError:
            raise CorpusError(f"unknown document: {doc_id}")

    def segments(self, policy: ChunkPolicy = None) -> Iterator[Segment]:
        policy = policy or ChunkPolicy.from_settings()
        for document in self.documents:
            yield from segment_document(document, policy)


def load_corpus(path: str) -> CorpusHandle:
    try:
        with open(path, "r", encoding="utf-8") as corpus_file:
            lines = corpus_file.readlines()
    except OSError as error:
        raise CorpusError(f"could not read corpus {path}: {error}") from error

    documents = []
    rejects = []
    seen = set()
    for line_number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        document, reason = _parse_document_line(line)
        if document and document.doc_id in seen:
            document, reason = None, f"duplicate doc_id: {document.doc_id}"
        if document is None:
            logger.warning(f"Rejected corpus line {line_number}: {reason}")
            rejects.append(CorpusReject(line_number=line_number, reason=reason))
            continue
        seen.add(document.doc_id)
        documents.append(document)

    logger.debug(
        f"Loaded corpus {path}: {len(documents)} documents, {len(rejects)} rejected"
    )
    return CorpusHandle(
        documents=documents,
        rejects=rejects,
        corpus_dir=os.path.dirname(os.path.abspath(path)),
    )


def _parse_document_line(line: str):
    try:
        data = json.loads(line)
    except json.JSONDecodeError as error:
        return None, f"malformed line: {error.msg}"
    if not isinstance(data, dict):
        return None, "malformed line: expected an object"

    serializer = DocumentSerializer(data=data)
    if not serializer.is_valid():
        return None, format_errors(serializer.errors)

    attrs = serializer.validated_data
    return (
        Document(
            doc_id=attrs["doc_id"],
            title=attrs["title"],
            sections=tuple(
                Section(
                    heading=section["heading"].strip(),
                    text=normalize_whitespace(section["text"]),
                    image_ids=tuple(section["image_ids"]),
                )
                for section in attrs["sections"]
            ),
            images=tuple(
                ImageAsset(
                    image_id=image["image_id"],
                    uri=image["uri"],
                    caption=image["caption"],
                    scene_graph=image["scene_graph"],
                )
                for image in attrs["images"]
            ),
        ),
        None,
    )


def section_text(section: Section, include_headings: bool = True) -> str:
    if include_headings and section.heading:
        return f"{section.heading}: {section.text}"
    return section.text


@dataclass
class _Chunk:
    # (section index, sentence) pairs; a section boundary inserts a paragraph joiner
    sentences: list
    image_ids: tuple = ()

    @property
    def token_count(self):
        return sum(count_tokens(sentence) for _, sentence in self.sentences)

    @property
    def text(self):
        parts = []
        previous = None
        for section_index, sentence in self.sentences:
            if parts:
                parts.append("\n\n" if section_index != previous else " ")
            parts.append(sentence)
            previous = section_index
        return "".join(parts)

    @property
    def source_sections(self):
        return tuple(sorted({index for index, _ in self.sentences}))


def segment_document(doc: Document, policy: ChunkPolicy) -> List[Segment]:
    chunks: List[_Chunk] = []
    buffer: Optional[_Chunk] = None

    for index, section in enumerate(doc.sections):
        sentences = [
            (index, sentence)
            for sentence in split_sentences(
                section_text(section, policy.include_headings)
            )
        ]
        if not sentences:
            continue

        if section.image_ids:
            # Image-bearing sections are never merged or split
            if buffer:
                chunks.append(buffer)
                buffer = None
            chunks.append(_Chunk(sentences=sentences, image_ids=section.image_ids))
            continue

        section_tokens = sum(count_tokens(sentence) for _, sentence in sentences)
        if buffer is None:
            buffer = _Chunk(sentences=sentences)
        elif (
            buffer.token_count + section_tokens <= policy.max_tokens
            or buffer.token_count < policy.min_tokens
        ):
            buffer.sentences.extend(sentences)
        else:
            chunks.append(buffer)
            buffer = _Chunk(sentences=sentences)

    if buffer:
        chunks.append(buffer)

    pieces: List[_Chunk] = []
    for chunk in chunks:
        if chunk.image_ids or chunk.token_count <= policy.max_tokens:
            pieces.append(chunk)
        else:
            pieces.extend(_split_chunk(chunk, policy.max_tokens))

    return [
        Segment(
            doc_id=doc.doc_id,
            segment_id=f"{doc.doc_id}#{k}",
            text=piece.text,
            image_ids=piece.image_ids,
            source_sections=piece.source_sections,
        )
        for k, piece in enumerate(pieces)
    ]


def _split_chunk(chunk: _Chunk, max_tokens: int) -> List[_Chunk]:
    units = []
    for section_index, sentence in chunk.sentences:
        words = sentence.split()
        if len(words) <= max_tokens:
            units.append((section_index, sentence))
            continue
        # Sentence is longer than a chunk, fall back to whitespace splitting
        for start in range(0, len(words), max_tokens):
            units.append((section_index, " ".join(words[start : start + max_tokens])))

    pieces = []
    current = _Chunk(sentences=[])
    for unit in units:
        unit_tokens = count_tokens(unit[1])
        if current.sentences and current.token_count + unit_tokens > max_tokens:
            pieces.append(current)
            current = _Chunk(sentences=[])
        current.sentences.append(unit)
    if current.sentences:
        pieces.append(current)
    return pieces


def resolve_images(seg: Segment, corpus: CorpusHandle) -> List[ImageAsset]:
    document = corpus.get(seg.doc_id)
    assets = []
    for image_id in seg.image_ids:
        asset = document.get_image(image_id)
        if asset is None:
            raise DanglingImageRefError(image_id)
        assets.append(asset)
    return assets
