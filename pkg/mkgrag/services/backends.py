"""
Model backends: chat completion (extractor, matcher, reformulator, answer
generator) and embeddings (query and evidence encoders).

All roles share one wire contract and only differ by template id / role flag:

    POST /v1/chat   {template_id, parts[], temperature, seed} -> {text}
    POST /v1/embed  {role, parts[], dim}                      -> {values[]}

MockBackend answers from fixtures and produces feature-hash embeddings, which
makes the whole pipeline deterministic offline. HttpBackend talks to a remote
service, either speaking the contract above ("native" profile) or mapped onto
completions/embeddings APIs ("openai" profile).
"""

import hashlib
import logging
import re
import threading
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol, Sequence

import numpy as np
import requests
from django.conf import settings

from mkgrag.utils import load_settings

logger = logging.getLogger(__name__)

QUERY = "query"
EVIDENCE = "evidence"
ROLES = (QUERY, EVIDENCE)

_embedding_token = re.compile(r"[^\W_]+")
_trigger_token = re.compile(r"\w+")


class BackendError(Exception):
    pass


class TransportError(BackendError):
    pass


class NoFixtureError(BackendError):
    pass


class EmbeddingDimensionError(BackendError):
    pass


@dataclass(frozen=True)
class Part:
    text: Optional[str] = None
    image: Optional[str] = None

    @classmethod
    def of_text(cls, text: str) -> "Part":
        return cls(text=text)

    @classmethod
    def of_image(cls, image_ref: str) -> "Part":
        return cls(image=image_ref)

    @property
    def is_text(self) -> bool:
        return self.text is not None

    def to_dict(self) -> dict:
        return {"text": self.text} if self.is_text else {"image": self.image}

    @classmethod
    def from_dict(cls, data: dict) -> "Part":
        if "text" in data:
            return cls(text=data["text"])
        return cls(image=data["image"])


@dataclass(frozen=True)
class ChatRequest:
    template_id: str
    parts: tuple
    temperature: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not any(part.is_text for part in self.parts):
            raise BackendError(f"chat request {self.template_id} has no text part")

    @property
    def text(self) -> str:
        return "\n".join(part.text for part in self.parts if part.is_text)

    def to_dict(self) -> dict:
        return {
            "template_id": self.template_id,
            "parts": [part.to_dict() for part in self.parts],
            "temperature": self.temperature,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class EmbeddingRequest:
    role: str
    parts: tuple
    dim: Optional[int] = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise BackendError(f"unknown embedding role: {self.role}")
        if not self.parts:
            raise BackendError("embedding request has no parts")

    def to_dict(self) -> dict:
        return {
            "role": self.role,
            "parts": [part.to_dict() for part in self.parts],
            "dim": self.dim,
        }


@dataclass(frozen=True, eq=False)
class EmbeddingVector:
    values: np.ndarray

    @classmethod
    def from_values(cls, values: Sequence[float], normalize: bool = True):
        array = np.asarray(values, dtype=np.float64)
        if array.ndim != 1 or array.size == 0:
            raise BackendError("embedding must be a non-empty vector")
        if not np.all(np.isfinite(array)):
            raise BackendError("embedding contains non-finite values")
        if normalize:
            norm = np.linalg.norm(array)
            if norm == 0.0:
                array = np.zeros_like(array)
                array[0] = 1.0
            else:
                array = array / norm
        array.setflags(write=False)
        return cls(values=array)

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def to_list(self) -> List[float]:
        return self.values.tolist()

    def __eq__(self, other):
        if not isinstance(other, EmbeddingVector):
            return NotImplemented
        return np.array_equal(self.values, other.values)


class ChatBackend(Protocol):
    def chat_complete(self, req: ChatRequest) -> str: ...


class EmbeddingBackend(Protocol):
    def embed(self, req: EmbeddingRequest) -> EmbeddingVector: ...


# Feature-hash embeddings


def _hash64(token: str, person: bytes) -> int:
    digest = hashlib.blake2b(
        token.encode("utf-8"), digest_size=8, person=person
    ).digest()
    return int.from_bytes(digest, "little")


def hash_index(token: str) -> int:
    return _hash64(token, b"mkgrag.index")


def hash_sign(token: str) -> int:
    return 1 if _hash64(token, b"mkgrag.sign") % 2 == 0 else -1


def role_token(role: str) -> str:
    # Can not collide with text tokens, which are purely alphanumeric
    return f"<role:{role}>"


def embedding_tokens(parts: Sequence[Part], role: str) -> List[str]:
    tokens = []
    for part in parts:
        if part.is_text:
            tokens.extend(_embedding_token.findall(part.text.lower()))
        else:
            tokens.append(part.image)
    tokens.append(role_token(role))
    return tokens


def mock_embedding(parts: Sequence[Part], role: str, dim: int) -> EmbeddingVector:
    if dim < 8:
        raise BackendError(f"embedding dim must be at least 8, got {dim}")
    values = np.zeros(dim, dtype=np.float64)
    for token in embedding_tokens(parts, role):
        values[hash_index(token) % dim] += hash_sign(token)
    return EmbeddingVector.from_values(values)


# Fixtures


@dataclass
class TemplateFixtures:
    responses: Dict[str, str] = field(default_factory=dict)
    fallback: Optional[str] = None


@dataclass
class MockFixtures:
    templates: Dict[str, TemplateFixtures] = field(default_factory=dict)
    fallback: Optional[str] = None

    def add(self, template_id: str, trigger: str, response: str):
        self.templates.setdefault(template_id, TemplateFixtures()).responses[
            trigger
        ] = response

    def set_fallback(self, template_id: str, response: Optional[str]):
        self.templates.setdefault(template_id, TemplateFixtures()).fallback = response

    def to_dict(self) -> dict:
        return {
            "fallback": self.fallback,
            "templates": {
                template_id: {
                    "fallback": template.fallback,
                    "responses": dict(template.responses),
                }
                for template_id, template in self.templates.items()
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MockFixtures":
        fixtures = cls(fallback=data.get("fallback"))
        for template_id, template in (data.get("templates") or {}).items():
            fixtures.templates[template_id] = TemplateFixtures(
                responses=dict(template.get("responses") or {}),
                fallback=template.get("fallback"),
            )
        return fixtures


_fixtures_cache = {}


def load_fixtures(path: str) -> MockFixtures:
    data = load_settings(path, _fixtures_cache.setdefault(path, {}))
    if data == "__JSON_ERROR__":
        raise BackendError(f"could not parse mock fixtures {path}")
    if data is None:
        logger.warning(f"No mock fixtures found at {path}")
        return MockFixtures(fallback=settings.MKGRAG_MOCK_FALLBACK)
    fixtures = MockFixtures.from_dict(data)
    if fixtures.fallback is None:
        fixtures.fallback = settings.MKGRAG_MOCK_FALLBACK
    return fixtures


class MockBackend:
    def __init__(self, fixtures: MockFixtures = None, dim: int = None):
        self.fixtures = fixtures or MockFixtures()
        self.dim = dim or settings.MKGRAG_EMBEDDING_DIM

    def chat_complete(self, req: ChatRequest) -> str:
        template = self.fixtures.templates.get(req.template_id)
        if template:
            for token in self._tokens(req.parts):
                if token in template.responses:
                    return template.responses[token]
            if template.fallback is not None:
                return template.fallback
        if self.fixtures.fallback is not None:
            return self.fixtures.fallback
        raise NoFixtureError(f"no fixture for template {req.template_id}")

    def embed(self, req: EmbeddingRequest) -> EmbeddingVector:
        dim = req.dim or self.dim
        return mock_embedding(req.parts, req.role, dim)

    @staticmethod
    def _tokens(parts):
        for part in parts:
            if part.is_text:
                yield from _trigger_token.findall(part.text)
            else:
                yield part.image


class HttpBackend:
    def __init__(
        self,
        base_url: str,
        profile: str = "native",
        timeout: float = None,
        dim: int = None,
        chat_model: str = "",
        embedding_model: str = "",
    ):
        if not base_url:
            raise BackendError("no backend url configured")
        if profile not in ("native", "openai"):
            raise BackendError(f"unknown backend profile: {profile}")
        self.base_url = base_url.rstrip("/")
        self.profile = profile
        self.timeout = timeout or settings.MKGRAG_BACKEND_TIMEOUT_SEC
        self.dim = dim or settings.MKGRAG_EMBEDDING_DIM
        self.chat_model = chat_model
        self.embedding_model = embedding_model

    def chat_complete(self, req: ChatRequest) -> str:
        if self.profile == "native":
            data = self._post("/v1/chat", req.to_dict())
            return data["text"]

        content = []
        for part in req.parts:
            if part.is_text:
                content.append({"type": "text", "text": part.text})
            else:
                content.append({"type": "image_url", "image_url": {"url": part.image}})
        data = self._post(
            "/v1/chat/completions",
            {
                "model": self.chat_model or req.template_id,
                "messages": [{"role": "user", "content": content}],
                "temperature": req.temperature,
                "seed": req.seed,
            },
        )
        return data["choices"][0]["message"]["content"] or ""

    def embed(self, req: EmbeddingRequest) -> EmbeddingVector:
        dim = req.dim or self.dim
        if self.profile == "native":
            data = self._post("/v1/embed", {**req.to_dict(), "dim": dim})
            values = data["values"]
        else:
            prefix = "query: " if req.role == QUERY else "passage: "
            text = " ".join(p.text if p.is_text else p.image for p in req.parts)
            data = self._post(
                "/v1/embeddings",
                {
                    "model": self.embedding_model,
                    "input": prefix + text,
                    "dimensions": dim,
                },
            )
            values = data["data"][0]["embedding"]
        if len(values) != dim:
            raise EmbeddingDimensionError(
                f"backend returned dim {len(values)}, expected {dim}"
            )
        return EmbeddingVector.from_values(values)

    def _post(self, path: str, body: dict) -> dict:
        url = self.base_url + path
        try:
            response = requests.post(url, json=body, timeout=self.timeout)
        except requests.exceptions.RequestException as error:
            logger.error(f"Backend request failed. url={url}: {error}")
            raise TransportError(f"backend unreachable at {url}: {error}") from error
        if response.status_code >= 400:
            raise BackendError(
                f"backend error {response.status_code} at {url}: {response.text[:200]}"
            )
        try:
            return response.json()
        except ValueError as error:
            raise BackendError(f"backend returned invalid JSON at {url}") from error


class LimitedBackend:
    """Caps the number of concurrent requests issued to the wrapped backend."""

    def __init__(self, inner, max_in_flight: int):
        self.inner = inner
        self.max_in_flight = max(1, max_in_flight)
        self._slots = threading.BoundedSemaphore(self.max_in_flight)

    def chat_complete(self, req: ChatRequest) -> str:
        with self._slots:
            return self.inner.chat_complete(req)

    def embed(self, req: EmbeddingRequest) -> EmbeddingVector:
        with self._slots:
            return self.inner.embed(req)


def get_backend():
    if settings.MKGRAG_BACKEND == "mock":
        inner = MockBackend(fixtures=load_fixtures(settings.MKGRAG_MOCK_FIXTURES))
    elif settings.MKGRAG_BACKEND == "http":
        inner = HttpBackend(
            settings.MKGRAG_BACKEND_URL,
            profile=settings.MKGRAG_BACKEND_PROFILE,
            chat_model=settings.MKGRAG_CHAT_MODEL,
            embedding_model=settings.MKGRAG_EMBEDDING_MODEL,
        )
    else:
        raise BackendError(f"unknown backend: {settings.MKGRAG_BACKEND}")
    return LimitedBackend(inner, settings.MKGRAG_BACKEND_MAX_IN_FLIGHT)


def embed_text(
    backend: EmbeddingBackend, role: str, text: str, image_refs=(), dim: int = None
) -> EmbeddingVector:
    parts = [Part.of_image(ref) for ref in image_refs]
    if text:
        parts.append(Part.of_text(text))
    return backend.embed(EmbeddingRequest(role=role, parts=tuple(parts), dim=dim))
