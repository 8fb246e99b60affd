import logging
import os
import struct
import threading
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from django.conf import settings
from django.utils import timezone

from mkgrag.services.backends import EVIDENCE, EmbeddingBackend, EmbeddingVector, embed_text
from mkgrag.services.fusion import graph_path, list_document_graphs, load_document_graph

logger = logging.getLogger(__name__)

DOCUMENT = "document"
ENTITY = "entity"
EDGE = "edge"
SEGMENT = "segment"
KINDS = (DOCUMENT, ENTITY, EDGE, SEGMENT)

MAGIC = b"MKGX"
FORMAT_VERSION = 1
# magic, version, dim, count, crc32 of everything after the header
_header = struct.Struct("<4sHIII")
_id_record = struct.Struct("<BII")


class VectorIndexError(Exception):
    pass


class DimensionMismatchError(VectorIndexError):
    pass


class IndexCorruptedError(VectorIndexError):
    pass


def cosine_similarity(a: EmbeddingVector, b: EmbeddingVector) -> float:
    a = _as_array(a)
    b = _as_array(b)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"dim mismatch: {a.shape[0]} != {b.shape[0]}")
    norm_a = np.linalg.norm(a)
    norm_b = np.linalg.norm(b)
    if norm_a == 0.0 or norm_b == 0.0:
        raise VectorIndexError("cosine of a zero vector")
    return float(np.clip(np.dot(a, b) / (norm_a * norm_b), -1.0, 1.0))


def _as_array(vector) -> np.ndarray:
    values = vector.values if isinstance(vector, EmbeddingVector) else vector
    return np.asarray(values, dtype=np.float64)


@dataclass(frozen=True)
class IndexEntry:
    item_id: str
    kind: str
    vector: EmbeddingVector
    payload_ref: str = ""


@dataclass(frozen=True)
class ScoredHit:
    item_id: str
    kind: str
    score: float

    @property
    def key(self) -> Tuple[str, str]:
        return self.kind, self.item_id


@dataclass
class UpsertResult:
    applied: int = 0
    errors: List[str] = field(default_factory=list)


@dataclass(frozen=True)
class _Snapshot:
    """Immutable view of the index, swapped as a whole on every write."""

    matrix: np.ndarray
    norms: np.ndarray
    keys: Tuple[Tuple[str, str], ...]
    payloads: Tuple[str, ...]
    kinds: np.ndarray
    positions: Dict[Tuple[str, str], int]


def _empty_snapshot(dim: int) -> _Snapshot:
    return _Snapshot(
        matrix=np.zeros((0, dim), dtype=np.float32),
        norms=np.zeros(0, dtype=np.float64),
        keys=(),
        payloads=(),
        kinds=np.zeros(0, dtype=np.int8),
        positions={},
    )


class VectorIndex:
    def __init__(self, dim: int):
        if dim < 1:
            raise VectorIndexError(f"invalid index dim {dim}")
        self.dim = dim
        self._write_lock = threading.Lock()
        self._snapshot = _empty_snapshot(dim)

    def __len__(self):
        return len(self._snapshot.keys)

    def size(self, kind: str = None) -> int:
        snapshot = self._snapshot
        if kind is None:
            return len(snapshot.keys)
        return int(np.count_nonzero(snapshot.kinds == KINDS.index(kind)))

    def get(self, kind: str, item_id: str) -> Optional[IndexEntry]:
        snapshot = self._snapshot
        position = snapshot.positions.get((kind, item_id))
        if position is None:
            return None
        return IndexEntry(
            item_id=item_id,
            kind=kind,
            vector=EmbeddingVector.from_values(snapshot.matrix[position], normalize=False),
            payload_ref=snapshot.payloads[position],
        )

    def entries(self) -> Iterable[IndexEntry]:
        snapshot = self._snapshot
        for kind, item_id in snapshot.keys:
            yield self.get(kind, item_id)

    def upsert(self, entries: Sequence[IndexEntry]) -> UpsertResult:
        result = UpsertResult()
        accepted: Dict[Tuple[str, str], Tuple[np.ndarray, str]] = {}
        for entry in entries:
            if entry.kind not in KINDS:
                result.errors.append(f"{entry.item_id}: unknown kind {entry.kind}")
                continue
            values = _as_array(entry.vector)
            if values.ndim != 1 or values.shape[0] != self.dim:
                result.errors.append(
                    f"{entry.item_id}: dim {values.shape[-1]} does not match index dim {self.dim}"
                )
                continue
            norm = np.linalg.norm(values)
            if norm == 0.0 or not np.isfinite(norm):
                result.errors.append(f"{entry.item_id}: zero or non-finite vector")
                continue
            accepted[(entry.kind, entry.item_id)] = (values / norm, entry.payload_ref)
            result.applied += 1

        for error in result.errors:
            logger.warning(f"Rejected index entry {error}")
        if not accepted:
            return result

        with self._write_lock:
            current = self._snapshot
            keys = list(current.keys)
            payloads = list(current.payloads)
            replaced = {}
            appended = []
            for key, (values, payload_ref) in accepted.items():
                position = current.positions.get(key)
                if position is None:
                    appended.append((key, values, payload_ref))
                else:
                    replaced[position] = values
                    payloads[position] = payload_ref

            matrix = np.array(current.matrix, dtype=np.float32, copy=True)
            for position, values in replaced.items():
                matrix[position] = values
            if appended:
                matrix = np.vstack(
                    [matrix, np.array([values for _, values, _ in appended], dtype=np.float32)]
                )
                for key, _, payload_ref in appended:
                    keys.append(key)
                    payloads.append(payload_ref)
            self._snapshot = self._build_snapshot(matrix, keys, payloads)
        return result

    def remove(self, kind: str, item_ids: Iterable[str]) -> int:
        with self._write_lock:
            current = self._snapshot
            doomed = {current.positions[(kind, i)] for i in item_ids if (kind, i) in current.positions}
            if not doomed:
                return 0
            keep = [p for p in range(len(current.keys)) if p not in doomed]
            self._snapshot = self._build_snapshot(
                current.matrix[keep],
                [current.keys[p] for p in keep],
                [current.payloads[p] for p in keep],
            )
        return len(doomed)

    def _build_snapshot(self, matrix: np.ndarray, keys, payloads) -> _Snapshot:
        matrix = np.ascontiguousarray(matrix, dtype=np.float32).reshape(len(keys), self.dim)
        matrix.setflags(write=False)
        return _Snapshot(
            matrix=matrix,
            norms=np.linalg.norm(matrix.astype(np.float64), axis=1),
            keys=tuple(keys),
            payloads=tuple(payloads),
            kinds=np.array([KINDS.index(kind) for kind, _ in keys], dtype=np.int8),
            positions={key: position for position, key in enumerate(keys)},
        )

    def search_topk(
        self,
        query: EmbeddingVector,
        kind: Union[str, Sequence[str]],
        k: int,
    ) -> List[ScoredHit]:
        if k < 1:
            raise VectorIndexError(f"k must be at least 1, got {k}")
        kinds = (kind,) if isinstance(kind, str) else tuple(kind)
        q = _as_array(query)
        if q.shape != (self.dim,):
            raise DimensionMismatchError(
                f"query dim {q.shape[-1]} does not match index dim {self.dim}"
            )
        q_norm = np.linalg.norm(q)
        if q_norm == 0.0:
            raise VectorIndexError("cosine of a zero vector")

        snapshot = self._snapshot
        candidates = np.flatnonzero(np.isin(snapshot.kinds, [KINDS.index(k_) for k_ in kinds]))
        if candidates.size == 0:
            return []
        scores = snapshot.matrix[candidates].astype(np.float64) @ q
        scores = np.clip(scores / (snapshot.norms[candidates] * q_norm), -1.0, 1.0)

        if candidates.size > k:
            # Keep every candidate tied with the k-th score so the tie rule decides
            threshold = np.partition(scores, candidates.size - k)[candidates.size - k]
            selected = np.flatnonzero(scores >= threshold)
        else:
            selected = np.arange(candidates.size)

        hits = [
            ScoredHit(
                item_id=snapshot.keys[candidates[i]][1],
                kind=snapshot.keys[candidates[i]][0],
                score=float(scores[i]),
            )
            for i in selected
        ]
        hits.sort(key=lambda hit: (-hit.score, hit.item_id, hit.kind))
        return hits[:k]

    # Persistence

    def save(self, path: str):
        snapshot = self._snapshot
        body = bytearray(snapshot.matrix.astype("<f4").tobytes())
        for (kind, item_id), payload_ref in zip(snapshot.keys, snapshot.payloads):
            item_bytes = item_id.encode("utf-8")
            payload_bytes = payload_ref.encode("utf-8")
            body += _id_record.pack(KINDS.index(kind), len(item_bytes), len(payload_bytes))
            body += item_bytes + payload_bytes
        header = _header.pack(
            MAGIC, FORMAT_VERSION, self.dim, len(snapshot.keys), zlib.crc32(body)
        )

        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        temp_path = path + ".tmp"
        with open(temp_path, "wb") as f:
            f.write(header)
            f.write(body)
        os.replace(temp_path, path)
        logger.info(f"Saved vector index with {len(snapshot.keys)} entries to {path}")

    @classmethod
    def load(cls, path: str) -> "VectorIndex":
        try:
            with open(path, "rb") as f:
                data = f.read()
        except OSError as error:
            raise VectorIndexError(f"could not read index {path}: {error}") from error

        if len(data) < _header.size:
            raise IndexCorruptedError(f"checksum mismatch in {path}: truncated header")
        magic, version, dim, count, checksum = _header.unpack_from(data)
        if magic != MAGIC:
            raise IndexCorruptedError(f"{path} is not a vector index file")
        if version != FORMAT_VERSION:
            raise IndexCorruptedError(f"unsupported index version {version} in {path}")
        body = data[_header.size:]
        if zlib.crc32(body) != checksum:
            raise IndexCorruptedError(f"checksum mismatch in {path}")

        try:
            vectors_size = count * dim * 4
            matrix = np.frombuffer(body[:vectors_size], dtype="<f4").astype(np.float32)
            keys, payloads = [], []
            offset = vectors_size
            for _ in range(count):
                kind_index, id_length, payload_length = _id_record.unpack_from(body, offset)
                offset += _id_record.size
                item_id = body[offset : offset + id_length].decode("utf-8")
                offset += id_length
                payload_ref = body[offset : offset + payload_length].decode("utf-8")
                offset += payload_length
                keys.append((KINDS[kind_index], item_id))
                payloads.append(payload_ref)
        except (struct.error, UnicodeDecodeError, IndexError, ValueError) as error:
            raise IndexCorruptedError(f"malformed id table in {path}: {error}") from error

        index = cls(dim)
        index._snapshot = index._build_snapshot(matrix, keys, payloads)
        return index


def _document_text(stored) -> str:
    parts = [stored.title] if stored.title else []
    parts.extend(segment.text for segment in stored.segments.values())
    return "\n\n".join(parts)


def _document_images(stored) -> List[str]:
    images = []
    for segment in stored.segments.values():
        images.extend(i for i in segment.image_ids if i not in images)
    return images


def build_engine_index(
    kg_dir: str,
    backend: EmbeddingBackend,
    dim: int = None,
    parallelism: int = None,
) -> VectorIndex:
    """
    Embeds every persisted document (title, segment texts and image ids) and
    every segment with the evidence encoder.
    """
    start = timezone.now()
    dim = dim or settings.MKGRAG_EMBEDDING_DIM
    parallelism = parallelism or settings.MKGRAG_PARALLELISM
    doc_ids = list_document_graphs(kg_dir)
    if not doc_ids:
        raise VectorIndexError(f"no knowledge graphs found in {kg_dir}")

    def embed_document(doc_id):
        stored = load_document_graph(kg_dir, doc_id)
        entries = [
            IndexEntry(
                item_id=doc_id,
                kind=DOCUMENT,
                vector=embed_text(
                    backend, EVIDENCE, _document_text(stored), _document_images(stored), dim
                ),
                payload_ref=graph_path(kg_dir, doc_id),
            )
        ]
        for segment in stored.segments.values():
            entries.append(
                IndexEntry(
                    item_id=segment.segment_id,
                    kind=SEGMENT,
                    vector=embed_text(backend, EVIDENCE, segment.text, segment.image_ids, dim),
                    payload_ref=doc_id,
                )
            )
        return entries

    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as executor:
            batches = list(executor.map(embed_document, doc_ids))
    else:
        batches = [embed_document(doc_id) for doc_id in doc_ids]

    index = VectorIndex(dim)
    result = index.upsert([entry for batch in batches for entry in batch])
    end = timezone.now()
    logger.info(
        f"Indexed {len(doc_ids)} documents, {result.applied} entries in {end - start}"
    )
    return index
