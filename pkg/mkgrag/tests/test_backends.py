import hashlib
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from unittest.mock import Mock, patch

import numpy as np
import requests
from django.test import SimpleTestCase, override_settings

from mkgrag.services.backends import (
    EVIDENCE,
    QUERY,
    BackendError,
    ChatRequest,
    EmbeddingDimensionError,
    EmbeddingRequest,
    EmbeddingVector,
    HttpBackend,
    LimitedBackend,
    MockBackend,
    MockFixtures,
    NoFixtureError,
    Part,
    TransportError,
    embed_text,
    get_backend,
    load_fixtures,
)
from mkgrag.tests.helpers import EngineFactoryMixin, disable_logging


def oracle_embedding(tokens, dim):
    def hash64(token, person):
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, person=person).digest()
        return int.from_bytes(digest, "little")

    values = np.zeros(dim)
    for token in tokens:
        sign = 1 if hash64(token, b"mkgrag.sign") % 2 == 0 else -1
        values[hash64(token, b"mkgrag.index") % dim] += sign
    return values / np.linalg.norm(values)


def chat(template_id: str, *parts: Part) -> ChatRequest:
    return ChatRequest(template_id=template_id, parts=tuple(parts))


class MockChatTestCase(SimpleTestCase):
    def setUp(self):
        self.fixtures = MockFixtures()
        self.fixtures.add("extract", "Paris", "paris records")
        self.fixtures.add("extract", "Seine", "seine records")
        self.fixtures.add("match", "img1", "image records")
        self.backend = MockBackend(self.fixtures, dim=32)

    def test_first_trigger_in_prompt_order_wins(self):
        request = chat("extract", Part.of_text("The Seine crosses Paris."))

        self.assertEqual("seine records", self.backend.chat_complete(request))

    def test_triggers_are_case_sensitive_tokens(self):
        request = chat("extract", Part.of_text("parisian PARIS Parisians"))

        with self.assertRaises(NoFixtureError):
            self.backend.chat_complete(request)

    def test_image_parts_are_triggers(self):
        request = chat("match", Part.of_text("Align this image."), Part.of_image("img1"))

        self.assertEqual("image records", self.backend.chat_complete(request))

    def test_fixtures_are_scoped_by_template(self):
        request = chat("answer", Part.of_text("Paris"))

        with self.assertRaisesMessage(NoFixtureError, "no fixture for template answer"):
            self.backend.chat_complete(request)

    def test_fallbacks(self):
        self.fixtures.set_fallback("extract", "template fallback")
        self.fixtures.fallback = "global fallback"

        self.assertEqual(
            "template fallback", self.backend.chat_complete(chat("extract", Part.of_text("Rome")))
        )
        self.assertEqual(
            "global fallback", self.backend.chat_complete(chat("answer", Part.of_text("Rome")))
        )

    def test_replies_are_deterministic(self):
        request = chat("extract", Part.of_text("Paris"))

        replies = {self.backend.chat_complete(request) for _ in range(10)}

        self.assertEqual({"paris records"}, replies)

    def test_request_without_text_part_is_rejected(self):
        with self.assertRaises(BackendError):
            chat("match", Part.of_image("img1"))


class MockEmbeddingTestCase(SimpleTestCase):
    def setUp(self):
        self.backend = MockBackend(MockFixtures(), dim=64)

    def embed(self, role, *parts, dim=None):
        return self.backend.embed(EmbeddingRequest(role=role, parts=tuple(parts), dim=dim))

    def test_matches_feature_hash_oracle(self):
        for role in (QUERY, EVIDENCE):
            vector = self.embed(role, Part.of_text("Alpha, beta!"))
            expected = oracle_embedding(["alpha", "beta", f"<role:{role}>"], 64)
            np.testing.assert_allclose(expected, vector.values, atol=1e-12)

    def test_non_ascii_letters_are_token_characters(self):
        vector = self.embed(QUERY, Part.of_text("Zürich, 東京タワー_east"))

        expected = oracle_embedding(["zürich", "東京タワー", "east", "<role:query>"], 64)
        np.testing.assert_allclose(expected, vector.values, atol=1e-12)

    def test_non_ascii_texts_are_distinguished(self):
        tokyo = self.embed(EVIDENCE, Part.of_text("東京タワー"))
        fuji = self.embed(EVIDENCE, Part.of_text("富士山"))
        zurich = self.embed(EVIDENCE, Part.of_text("Zürich"))

        self.assertNotEqual(tokyo, fuji)
        self.assertNotEqual(self.embed(EVIDENCE, Part.of_text("z rich")), zurich)

    def test_image_ids_are_tokens(self):
        vector = self.embed(EVIDENCE, Part.of_image("img7"), Part.of_text("tower"))

        expected = oracle_embedding(["img7", "tower", "<role:evidence>"], 64)
        np.testing.assert_allclose(expected, vector.values, atol=1e-12)

    def test_embeddings_are_deterministic_and_unit_norm(self):
        first = self.embed(QUERY, Part.of_text("Where is the tower?"))
        second = self.embed(QUERY, Part.of_text("Where is the tower?"))

        self.assertEqual(first, second)
        self.assertAlmostEqual(1.0, first.norm, places=12)
        self.assertEqual(64, first.dim)

    def test_roles_are_distinguished(self):
        query = self.embed(QUERY, Part.of_text("tower"))
        evidence = self.embed(EVIDENCE, Part.of_text("tower"))

        self.assertNotEqual(query, evidence)

    def test_requested_dimension(self):
        self.assertEqual(16, self.embed(QUERY, Part.of_text("tower"), dim=16).dim)

    def test_empty_parts_are_rejected(self):
        with self.assertRaises(BackendError):
            EmbeddingRequest(role=QUERY, parts=())

    def test_unknown_role_is_rejected(self):
        with self.assertRaises(BackendError):
            EmbeddingRequest(role="answer", parts=(Part.of_text("x"),))

    def test_embed_text_helper(self):
        vector = embed_text(self.backend, EVIDENCE, "tower", image_refs=["img7"])

        self.assertEqual(self.embed(EVIDENCE, Part.of_image("img7"), Part.of_text("tower")), vector)

    def test_zero_vector_is_replaced(self):
        vector = EmbeddingVector.from_values([0.0, 0.0, 0.0])

        self.assertEqual([1.0, 0.0, 0.0], vector.to_list())

    def test_non_finite_values_are_rejected(self):
        with self.assertRaises(BackendError):
            EmbeddingVector.from_values([1.0, float("nan")])


def json_response(data, status_code=200):
    response = Mock()
    response.status_code = status_code
    response.json.return_value = data
    response.text = str(data)
    return response


class HttpBackendTestCase(SimpleTestCase):
    def test_native_chat(self):
        backend = HttpBackend("http://models:8000/", timeout=5)

        with patch("requests.post", return_value=json_response({"text": "reply"})) as post:
            reply = backend.chat_complete(chat("answer", Part.of_text("Q"), Part.of_image("img")))

        self.assertEqual("reply", reply)
        post.assert_called_once_with(
            "http://models:8000/v1/chat",
            json={
                "template_id": "answer",
                "parts": [{"text": "Q"}, {"image": "img"}],
                "temperature": 0.0,
                "seed": 0,
            },
            timeout=5,
        )

    def test_native_embed(self):
        backend = HttpBackend("http://models:8000", dim=4)

        with patch("requests.post", return_value=json_response({"values": [3, 0, 4, 0]})) as post:
            vector = backend.embed(EmbeddingRequest(role=QUERY, parts=(Part.of_text("Q"),)))

        self.assertEqual([0.6, 0.0, 0.8, 0.0], vector.to_list())
        self.assertEqual(4, post.call_args.kwargs["json"]["dim"])

    def test_openai_profile(self):
        backend = HttpBackend(
            "http://models:8000", profile="openai", dim=2, chat_model="vlm", embedding_model="enc"
        )
        completion = {"choices": [{"message": {"content": "reply"}}]}
        embedding = {"data": [{"embedding": [1.0, 0.0]}]}

        with patch("requests.post", side_effect=[json_response(completion), json_response(embedding)]) as post:
            reply = backend.chat_complete(chat("answer", Part.of_text("Q"), Part.of_image("a.png")))
            vector = backend.embed(EmbeddingRequest(role=EVIDENCE, parts=(Part.of_text("doc"),)))

        self.assertEqual("reply", reply)
        self.assertEqual([1.0, 0.0], vector.to_list())
        chat_call, embed_call = post.call_args_list
        self.assertEqual("http://models:8000/v1/chat/completions", chat_call.args[0])
        self.assertEqual("vlm", chat_call.kwargs["json"]["model"])
        self.assertEqual(
            {"type": "image_url", "image_url": {"url": "a.png"}},
            chat_call.kwargs["json"]["messages"][0]["content"][1],
        )
        self.assertEqual("passage: doc", embed_call.kwargs["json"]["input"])

    def test_dimension_mismatch(self):
        backend = HttpBackend("http://models:8000", dim=8)

        with patch("requests.post", return_value=json_response({"values": [1.0, 0.0]})):
            with self.assertRaises(EmbeddingDimensionError):
                backend.embed(EmbeddingRequest(role=QUERY, parts=(Part.of_text("Q"),)))

    @disable_logging
    def test_transport_error(self):
        backend = HttpBackend("http://models:8000")

        with patch("requests.post", side_effect=requests.exceptions.ConnectionError("refused")):
            with self.assertRaises(TransportError):
                backend.chat_complete(chat("answer", Part.of_text("Q")))

    def test_error_status(self):
        backend = HttpBackend("http://models:8000")

        with patch("requests.post", return_value=json_response({"error": "boom"}, 500)):
            with self.assertRaisesMessage(BackendError, "backend error 500"):
                backend.chat_complete(chat("answer", Part.of_text("Q")))

    def test_configuration_errors(self):
        with self.assertRaises(BackendError):
            HttpBackend("")
        with self.assertRaises(BackendError):
            HttpBackend("http://models:8000", profile="grpc")


class SlowBackend:
    def __init__(self):
        self.active = 0
        self.peak = 0
        self.lock = threading.Lock()

    def chat_complete(self, req):
        with self.lock:
            self.active += 1
            self.peak = max(self.peak, self.active)
        time.sleep(0.01)
        with self.lock:
            self.active -= 1
        return req.template_id


class LimitedBackendTestCase(SimpleTestCase):
    def test_in_flight_requests_are_capped(self):
        inner = SlowBackend()
        backend = LimitedBackend(inner, max_in_flight=2)

        with ThreadPoolExecutor(max_workers=8) as executor:
            replies = list(
                executor.map(
                    lambda i: backend.chat_complete(chat(f"t{i}", Part.of_text("x"))), range(16)
                )
            )

        self.assertEqual([f"t{i}" for i in range(16)], replies)
        self.assertLessEqual(inner.peak, 2)


class BackendFactoryTestCase(SimpleTestCase, EngineFactoryMixin):
    def setUp(self):
        self.setup_temp_data_dir()

    def test_mock_backend_from_fixture_file(self):
        fixtures = MockFixtures()
        fixtures.add("answer", "Paris", "France")
        self.write_fixtures(fixtures)

        backend = get_backend()

        self.assertIsInstance(backend.inner, MockBackend)
        self.assertEqual("France", backend.chat_complete(chat("answer", Part.of_text("Paris"))))

    def test_fixture_text_is_returned_verbatim(self):
        fixtures = MockFixtures(fallback="../unknown")
        fixtures.add("answer", "build", "./configure then make")
        self.write_fixtures(fixtures)

        backend = get_backend()

        self.assertEqual("./configure then make", backend.chat_complete(chat("answer", Part.of_text("build it"))))
        self.assertEqual("../unknown", backend.chat_complete(chat("answer", Part.of_text("other"))))

    @disable_logging
    def test_missing_fixture_file(self):
        with override_settings(MKGRAG_MOCK_FALLBACK="n/a"):
            fixtures = load_fixtures(self.data_dir + "/missing.json")

        self.assertEqual("n/a", fixtures.fallback)

    def test_http_backend(self):
        with override_settings(MKGRAG_BACKEND="http", MKGRAG_BACKEND_URL="http://models:8000"):
            backend = get_backend()

        self.assertIsInstance(backend.inner, HttpBackend)

    def test_unknown_backend(self):
        with override_settings(MKGRAG_BACKEND="grpc"):
            with self.assertRaises(BackendError):
                get_backend()
