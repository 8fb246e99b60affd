import json
import logging
import os
import random
import shutil
import tempfile
from typing import List, Optional

from django.test import override_settings

from mkgrag.services.backends import MockBackend, MockFixtures
from mkgrag.services.corpus import ChunkPolicy, load_corpus
from mkgrag.services.experiments import DatasetRecord
from mkgrag.services.fusion import (
    Description,
    MMEdge,
    MMEntity,
    MultimodalKG,
    RegionAttachment,
    build_document_graph,
    edge_key,
    save_document_graph,
)
from mkgrag.services.index import build_engine_index
from mkgrag.services.scenegraph import BBox

# Mount Fuji worked example, as emitted by an extraction/matching model
FUJI_TEXTUAL_RECORDS = """
(``entity''|MOUNT FUJI|location|Mount Fuji is an active stratovolcano located on Japan's Honshu Island, with a peak elevation of 3,776.24 meters. )
(``entity''|HONSHU ISLAND|location|Honshu Island is the largest island of Japan, where Mount Fuji is situated. )
(``entity''|CHERRY BLOSSOMS|concept|Cherry blossoms are a symbol of Japan, known for their beauty and cultural significance, often associated with the arrival of spring. )
(``entity''|SHINKANSEN|technology|The Shinkansen, also known as the bullet train, is a network of high-speed railway lines in Japan. )
(``relationship''|MOUNT FUJI|HONSHU ISLAND|Mount Fuji is located on Honshu Island, making the island its geographical setting.|9)
(``relationship''|MOUNT FUJI|CHERRY BLOSSOMS|Both Mount Fuji and cherry blossoms are iconic symbols of Japan, often celebrated together in cultural contexts.|8)
(``relationship''|MOUNT FUJI|SHINKANSEN|Mount Fuji and the Shinkansen are both recognized as national symbols of Japan.|7)
"""

FUJI_MATCH_OUTPUT = """
(``mapping''|<image>|MOUNT FUJI|8)
(``mapping''|<object-3>|MOUNT FUJI|9)
(``mapping''|<object-0>|SHINKANSEN|7)
(``mapping''|<relation-2>|MOUNT FUJI|SHINKANSEN|7)
"""

FUJI_SCENE_GRAPH = {
    "objects": [
        {"id": "object-0", "category": "train", "bbox": [0.06, 0.64, 1.0, 0.77]},
        {"id": "object-1", "category": "fence", "bbox": [0.0, 0.8, 0.98, 0.88]},
        {"id": "object-2", "category": "snow", "bbox": [0.25, 0.29, 0.67, 0.49]},
        {"id": "object-3", "category": "mountain", "bbox": [0.0, 0.3, 1.0, 0.64]},
    ],
    "relations": [
        {"id": "relation-0", "subject": "object-0", "predicate": "over", "object": "object-1"},
        {"id": "relation-1", "subject": "object-2", "predicate": "on", "object": "object-3"},
        {"id": "relation-2", "subject": "object-3", "predicate": "behind", "object": "object-0"},
    ],
}

FUJI_SCENE_GRAPH_BLOCK = "\n".join(
    [
        "- <object-0>: train, (0.06, 0.64, 1.0, 0.77)",
        "- <object-1>: fence, (0.0, 0.8, 0.98, 0.88)",
        "- <object-2>: snow, (0.25, 0.29, 0.67, 0.49)",
        "- <object-3>: mountain, (0.0, 0.3, 1.0, 0.64)",
        "- <relation-0>: <object-0> over <object-1>",
        "- <relation-1>: <object-2> on <object-3>",
        "- <relation-2>: <object-3> behind <object-0>",
    ]
)


def disable_logging(f):
    def wrapper(*args):
        logging.disable(logging.CRITICAL)
        try:
            return f(*args)
        finally:
            logging.disable(logging.NOTSET)

    return wrapper


def words(count: int, prefix: str = "word") -> str:
    return " ".join(f"{prefix}{i}" for i in range(count))


class EngineFactoryMixin:
    def setup_temp_data_dir(self):
        self.data_dir = tempfile.mkdtemp()
        self.kg_dir = os.path.join(self.data_dir, "kg")
        self.settings_override = override_settings(
            MKGRAG_DATA_DIR=self.data_dir,
            MKGRAG_KG_FOLDER=self.kg_dir,
            MKGRAG_INDEX_FILE=os.path.join(self.data_dir, "index.bin"),
            MKGRAG_MOCK_FIXTURES=os.path.join(self.data_dir, "fixtures.json"),
        )
        self.settings_override.enable()
        self.addCleanup(self.cleanup_temp_data_dir)

    def cleanup_temp_data_dir(self):
        shutil.rmtree(self.data_dir)
        self.settings_override.disable()

    def make_document(
        self,
        doc_id: str,
        sections: List[dict],
        title: str = "",
        images: Optional[List[dict]] = None,
    ) -> dict:
        return {
            "doc_id": doc_id,
            "title": title,
            "sections": sections,
            "images": images or [],
        }

    def write_corpus(self, documents: List[dict], name: str = "corpus.jsonl") -> str:
        path = os.path.join(self.data_dir, name)
        with open(path, "w", encoding="utf-8") as f:
            for document in documents:
                f.write(json.dumps(document) + "\n")
        return path

    def write_scene_graph(self, doc_id: str, image_id: str, content: dict) -> str:
        folder = os.path.join(self.data_dir, "scene_graphs", doc_id)
        os.makedirs(folder, exist_ok=True)
        path = os.path.join(folder, f"{image_id}.json")
        with open(path, "w", encoding="utf-8") as f:
            json.dump(content, f)
        return path

    def write_fixtures(self, fixtures: MockFixtures) -> str:
        path = os.path.join(self.data_dir, "fixtures.json")
        with open(path, "w", encoding="utf-8") as f:
            json.dump(fixtures.to_dict(), f)
        return path

    def build_engine(
        self,
        documents: List[dict],
        fixtures: MockFixtures,
        dim: int = 256,
        policy: ChunkPolicy = None,
    ):
        corpus = load_corpus(self.write_corpus(documents))
        backend = MockBackend(fixtures=fixtures, dim=dim)
        policy = policy or ChunkPolicy()
        for document in corpus:
            kg, segments = build_document_graph(document, corpus, backend, policy=policy)
            save_document_graph(kg, segments, self.kg_dir, title=document.title)
        index = build_engine_index(self.kg_dir, backend, dim=dim, parallelism=1)
        return backend, index


class GraphFactoryMixin:
    def make_entity(
        self,
        name: str,
        segment_id: str = "doc#0",
        description: str = None,
        entity_type: str = "concept",
        regions=(),
    ) -> MMEntity:
        return MMEntity(
            name=name,
            entity_type=entity_type,
            descriptions=[Description(description or f"{name.lower()} description", segment_id)],
            regions=list(regions),
            source_segments={segment_id},
        )

    def make_edge(
        self,
        source: str,
        target: str,
        segment_id: str = "doc#0",
        description: str = None,
        strength: float = 5.0,
    ) -> MMEdge:
        return MMEdge(
            endpoint_key=edge_key(source, target),
            descriptions=[
                Description(
                    description or f"{source.lower()} relates to {target.lower()}",
                    segment_id,
                    source=source,
                    target=target,
                )
            ],
            strength=strength,
            source_segments={segment_id},
        )

    def make_graph(self, doc_id: str, nodes, edges=(), segment_id: str = None) -> MultimodalKG:
        segment_id = segment_id or f"{doc_id}#0"
        kg = MultimodalKG(doc_id=doc_id)
        for node in nodes:
            kg.add_node(self.make_entity(node, segment_id) if isinstance(node, str) else node)
        for edge in edges:
            kg.add_edge(self.make_edge(*edge, segment_id) if isinstance(edge, tuple) else edge)
        return kg

    def random_fragment(self, rng: random.Random, doc_id: str, names: List[str]) -> MultimodalKG:
        segment_id = f"{doc_id}#{rng.randint(0, 5)}"
        chosen = rng.sample(names, rng.randint(1, min(5, len(names))))
        kg = MultimodalKG(doc_id=doc_id)
        for name in chosen:
            regions = []
            if rng.random() < 0.5:
                x1, y1 = rng.choice([0.0, 0.1, 0.2]), rng.choice([0.0, 0.3])
                regions.append(
                    RegionAttachment(
                        f"img{rng.randint(0, 2)}",
                        BBox(x1, y1, x1 + 0.5, y1 + 0.5) if rng.random() < 0.7 else None,
                        float(rng.randint(0, 10)),
                    )
                )
            kg.add_node(
                self.make_entity(
                    name,
                    segment_id,
                    description=f"{name.lower()} fact {rng.randint(0, 3)}",
                    entity_type=rng.choice(["concept", "location", ""]),
                    regions=regions,
                )
            )
        for _ in range(rng.randint(0, 4)):
            if len(chosen) < 2:
                break
            source, target = rng.sample(chosen, 2)
            kg.add_edge(
                self.make_edge(
                    source,
                    target,
                    segment_id,
                    description=f"link {rng.randint(0, 3)}",
                    strength=float(rng.randint(0, 10)),
                )
            )
        return kg


class PlantedCorpusMixin(EngineFactoryMixin):
    """
    Synthetic corpora where every query carries a salt token found only in
    its gold document, gold entity and gold segment. Extraction, matching and
    answer fixtures are keyed by per-document marker tokens.
    """

    def salt(self, i: int) -> str:
        return f"salt{i:03d}"

    def gold_answer(self, i: int) -> str:
        return f"Gold answer {i}"

    def planted_fixtures(self) -> MockFixtures:
        fixtures = MockFixtures(fallback="unknown")
        fixtures.set_fallback("extract", "")
        fixtures.set_fallback("match", "")
        fixtures.set_fallback("answer", "unknown")
        return fixtures

    def planted_corpus(self, doc_count: int = 200, query_count: int = 50):
        fixtures = self.planted_fixtures()
        documents = []
        dataset = []
        for i in range(doc_count):
            doc_id = f"doc{i:03d}"
            image_id = f"img{i:03d}"
            salt = self.salt(i)
            documents.append(
                self.make_document(
                    doc_id,
                    sections=[
                        {
                            "heading": "",
                            "text": f"marker{i:03d} {salt} {salt} {salt} "
                            f"landmark{i:03d} stands near town{i:03d}.",
                            "image_ids": [image_id],
                        }
                    ],
                    images=[{"image_id": image_id}],
                )
            )
            landmark = f"LANDMARK {i:03d}"
            town = f"TOWN {i:03d}"
            fixtures.add(
                "extract",
                f"marker{i:03d}",
                "\n".join(
                    [
                        f'("entity"|{landmark}|place|A {salt} {salt} {salt} site, ans{i:03d}.)',
                        f'("entity"|{town}|place|A settlement with {salt} roads.)',
                        f'("relationship"|{landmark}|{town}|The {salt} site overlooks the town.|6)',
                    ]
                ),
            )
            fixtures.add("match", image_id, f'("matching"|<image>|{landmark}|8)')
            fixtures.add("answer", f"ans{i:03d}", self.gold_answer(i))
            if i < query_count:
                dataset.append(
                    DatasetRecord(
                        question=f"Which place is {salt} {salt} {salt}?",
                        gold_doc_id=doc_id,
                        gold_answers=[self.gold_answer(i)],
                        image_id=image_id,
                        query_id=f"q{i:03d}",
                        split="single-hop" if i % 2 == 0 else "multi-hop",
                        gold_elements=[landmark, town, f"{landmark}|{town}"],
                        gold_segment_ids=[f"{doc_id}#0"],
                    )
                )
        return documents, fixtures, dataset

    def one_hop_corpus(self, doc_count: int = 20):
        """The answer is only reachable through the neighbor of the best seed."""
        fixtures = self.planted_fixtures()
        documents = []
        dataset = []
        for i in range(doc_count):
            doc_id = f"hop{i:03d}"
            salt = self.salt(i)
            hub = f"HUB {i:03d}"
            leaf = f"LEAF {i:03d}"
            documents.append(
                self.make_document(
                    doc_id,
                    sections=[
                        {"heading": "", "text": f"hubmark{i:03d} {salt} {salt} {salt} hub text."},
                        {"heading": "", "text": f"leafmark{i:03d} leaf text holds ans{i:03d}."},
                    ],
                )
            )
            fixtures.add(
                "extract",
                f"hubmark{i:03d}",
                "\n".join(
                    [
                        f'("entity"|{hub}|place|The {salt} {salt} {salt} hub.)',
                        f'("entity"|{leaf}|place|A nearby leaf.)',
                        f'("relationship"|{hub}|{leaf}|The hub feeds the leaf.|5)',
                    ]
                ),
            )
            fixtures.add(
                "extract",
                f"leafmark{i:03d}",
                f'("entity"|{leaf}|place|The leaf keeps ans{i:03d}.)',
            )
            fixtures.add("answer", f"ans{i:03d}", self.gold_answer(i))
            dataset.append(
                DatasetRecord(
                    question=f"What does the {salt} {salt} {salt} hub feed?",
                    gold_doc_id=doc_id,
                    gold_answers=[self.gold_answer(i)],
                    query_id=f"h{i:03d}",
                    gold_elements=[hub, leaf],
                )
            )
        return documents, fixtures, dataset

    def noisy_corpus(self, doc_count: int = 20, noise_sections: int = 4):
        """Every document mixes one evidence section with unrelated noise sections."""
        fixtures = self.planted_fixtures()
        documents = []
        dataset = []
        for i in range(doc_count):
            doc_id = f"noisy{i:03d}"
            salt = self.salt(i)
            sections = [
                {"heading": "", "text": f"goldmark{i:03d} {salt} {salt} {salt} evidence ans{i:03d}."}
            ]
            sections.extend(
                {"heading": "", "text": f"{salt} filler {words(5, f'n{i:03d}x{k}')}."}
                for k in range(noise_sections)
            )
            documents.append(self.make_document(doc_id, sections=sections))
            fixtures.add(
                "extract",
                f"goldmark{i:03d}",
                f'("entity"|EVIDENCE {i:03d}|fact|The {salt} {salt} {salt} evidence ans{i:03d}.)',
            )
            fixtures.add("answer", f"ans{i:03d}", self.gold_answer(i))
            dataset.append(
                DatasetRecord(
                    question=f"What is {salt} {salt} {salt}?",
                    gold_doc_id=doc_id,
                    gold_answers=[self.gold_answer(i)],
                    query_id=f"n{i:03d}",
                    gold_elements=[f"EVIDENCE {i:03d}"],
                    gold_segment_ids=[f"{doc_id}#0"],
                )
            )
        return documents, fixtures, dataset
