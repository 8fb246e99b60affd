"""
Retriever training objectives as plain numpy functions.

The in-batch contrastive loss treats row i of the evidences as the positive
of query i and every other row as a negative. The combined objective adds a
KL term pulling the query's distribution over the batch evidences towards
the distribution induced by the declarative rewrite of the question. Both
distributions are softmaxes of cosine similarities at temperature tau.
"""

import struct
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
from django.conf import settings

MAGIC = b"MKGB"
FORMAT_VERSION = 1
# magic, version, dim, batch size, tau, alpha, has declaratives
_header = struct.Struct("<4sHIIddB")


class ObjectiveError(Exception):
    pass


@dataclass
class BatchEmbeddings:
    queries: np.ndarray
    evidences: np.ndarray
    declaratives: Optional[np.ndarray] = None
    temperature: float = None
    alpha: float = None

    def __post_init__(self):
        if self.temperature is None:
            self.temperature = settings.MKGRAG_TEMPERATURE_TAU
        if self.alpha is None:
            self.alpha = settings.MKGRAG_KL_ALPHA
        self.queries = np.atleast_2d(np.asarray(self.queries, dtype=np.float64))
        self.evidences = np.atleast_2d(np.asarray(self.evidences, dtype=np.float64))
        if self.declaratives is not None:
            self.declaratives = np.atleast_2d(np.asarray(self.declaratives, dtype=np.float64))

        if self.temperature <= 0:
            raise ObjectiveError(f"temperature must be positive, got {self.temperature}")
        if self.alpha < 0:
            raise ObjectiveError(f"alpha must be non-negative, got {self.alpha}")
        if self.queries.shape[0] < 1:
            raise ObjectiveError("empty batch")
        if self.evidences.shape != self.queries.shape:
            raise ObjectiveError(
                f"evidences {self.evidences.shape} do not match queries {self.queries.shape}"
            )
        if self.declaratives is not None and self.declaratives.shape != self.queries.shape:
            raise ObjectiveError(
                f"declaratives {self.declaratives.shape} do not match queries {self.queries.shape}"
            )

    @property
    def size(self) -> int:
        return self.queries.shape[0]

    @property
    def dim(self) -> int:
        return self.queries.shape[1]


def _normalize_rows(matrix: np.ndarray):
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ObjectiveError("zero vector in batch")
    return matrix / norms, norms


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = np.max(logits, axis=-1, keepdims=True)
    return logits - (m + np.log(np.sum(np.exp(logits - m), axis=-1, keepdims=True)))


def similarity_logits(left: np.ndarray, evidences: np.ndarray, temperature: float) -> np.ndarray:
    left_n, _ = _normalize_rows(left)
    evidences_n, _ = _normalize_rows(evidences)
    return left_n @ evidences_n.T / temperature


def infonce_rows(batch: BatchEmbeddings) -> np.ndarray:
    logits = similarity_logits(batch.queries, batch.evidences, batch.temperature)
    m = np.max(logits, axis=1)
    lse = m + np.log(np.sum(np.exp(logits - m[:, None]), axis=1))
    return lse - np.diag(logits)


def infonce_loss(batch: BatchEmbeddings, row: int) -> float:
    if not 0 <= row < batch.size:
        raise ObjectiveError(f"row {row} outside batch of size {batch.size}")
    return float(infonce_rows(batch)[row])


def batch_infonce(batch: BatchEmbeddings) -> float:
    return float(np.mean(infonce_rows(batch)))


def kl_divergence(p_logits, q_logits) -> float:
    p_logits = np.asarray(p_logits, dtype=np.float64)
    q_logits = np.asarray(q_logits, dtype=np.float64)
    if p_logits.shape != q_logits.shape:
        raise ObjectiveError(f"dim mismatch: {p_logits.shape} != {q_logits.shape}")
    log_p = _log_softmax(p_logits)
    log_q = _log_softmax(q_logits)
    return float(np.sum(np.exp(log_p) * (log_p - log_q), axis=-1))


def _kl_rows(batch: BatchEmbeddings):
    query_logits = similarity_logits(batch.queries, batch.evidences, batch.temperature)
    declarative_logits = similarity_logits(batch.declaratives, batch.evidences, batch.temperature)
    log_p = _log_softmax(query_logits)
    log_r = _log_softmax(declarative_logits)
    p = np.exp(log_p)
    return np.sum(p * (log_p - log_r), axis=1), p, np.exp(log_r), log_p, log_r


def _require_declaratives(batch: BatchEmbeddings):
    if batch.alpha > 0 and batch.declaratives is None:
        raise ObjectiveError("alpha > 0 requires declarative embeddings")


def combined_objective(batch: BatchEmbeddings) -> float:
    _require_declaratives(batch)
    loss = batch_infonce(batch)
    if batch.alpha == 0:
        return loss
    kl, *_ = _kl_rows(batch)
    return float(loss + batch.alpha * np.mean(kl))


def _normalization_backward(x: np.ndarray, norms: np.ndarray, grad_normalized: np.ndarray):
    x_n = x / norms
    projection = np.sum(x_n * grad_normalized, axis=1, keepdims=True)
    return (grad_normalized - x_n * projection) / norms


def combined_objective_gradients(batch: BatchEmbeddings) -> Dict[str, np.ndarray]:
    """
    Analytic gradients of combined_objective with respect to the raw query,
    evidence and declarative rows. Keys: "queries", "evidences" and, when
    the batch carries them, "declaratives".
    """
    _require_declaratives(batch)
    tau = batch.temperature
    size = batch.size
    queries_n, query_norms = _normalize_rows(batch.queries)
    evidences_n, evidence_norms = _normalize_rows(batch.evidences)

    p = np.exp(_log_softmax(queries_n @ evidences_n.T / tau))
    grad_query_logits = (p - np.eye(size)) / size
    grad_declarative_logits = None

    if batch.alpha > 0:
        kl, p, r, log_p, log_r = _kl_rows(batch)
        grad_query_logits += (batch.alpha / size) * p * ((log_p - log_r) - kl[:, None])
        grad_declarative_logits = (batch.alpha / size) * (r - p)

    grad_queries_n = grad_query_logits @ evidences_n / tau
    grad_evidences_n = grad_query_logits.T @ queries_n / tau
    gradients = {}

    if batch.declaratives is not None:
        declaratives_n, declarative_norms = _normalize_rows(batch.declaratives)
        if grad_declarative_logits is None:
            gradients["declaratives"] = np.zeros_like(batch.declaratives)
        else:
            grad_evidences_n += grad_declarative_logits.T @ declaratives_n / tau
            gradients["declaratives"] = _normalization_backward(
                batch.declaratives,
                declarative_norms,
                grad_declarative_logits @ evidences_n / tau,
            )

    gradients["queries"] = _normalization_backward(batch.queries, query_norms, grad_queries_n)
    gradients["evidences"] = _normalization_backward(
        batch.evidences, evidence_norms, grad_evidences_n
    )
    return gradients


def save_batch_file(batch: BatchEmbeddings, path: str):
    has_declaratives = batch.declaratives is not None
    with open(path, "wb") as f:
        f.write(
            _header.pack(
                MAGIC,
                FORMAT_VERSION,
                batch.dim,
                batch.size,
                batch.temperature,
                batch.alpha,
                int(has_declaratives),
            )
        )
        f.write(batch.queries.astype("<f4").tobytes())
        f.write(batch.evidences.astype("<f4").tobytes())
        if has_declaratives:
            f.write(batch.declaratives.astype("<f4").tobytes())


def load_batch_file(path: str) -> BatchEmbeddings:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as error:
        raise ObjectiveError(f"could not read batch file {path}: {error}") from error
    if len(data) < _header.size:
        raise ObjectiveError(f"truncated batch file {path}")
    magic, version, dim, size, tau, alpha, has_declaratives = _header.unpack_from(data)
    if magic != MAGIC or version != FORMAT_VERSION:
        raise ObjectiveError(f"{path} is not a version {FORMAT_VERSION} batch file")

    matrix_bytes = dim * size * 4
    expected = _header.size + matrix_bytes * (3 if has_declaratives else 2)
    if len(data) != expected:
        raise ObjectiveError(f"batch file {path} has {len(data)} bytes, expected {expected}")

    def matrix(position):
        start = _header.size + position * matrix_bytes
        return np.frombuffer(data[start : start + matrix_bytes], dtype="<f4").reshape(size, dim)

    return BatchEmbeddings(
        queries=matrix(0),
        evidences=matrix(1),
        declaratives=matrix(2) if has_declaratives else None,
        temperature=tau,
        alpha=alpha,
    )
