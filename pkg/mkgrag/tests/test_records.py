import json
import random

from django.test import SimpleTestCase

from mkgrag.services.backends import MockBackend, MockFixtures
from mkgrag.services.corpus import ImageAsset
from mkgrag.services.records import (
    ImageMatch,
    ObjectMatch,
    RecordBatch,
    RecordsError,
    RelationMatch,
    TextualEntity,
    TextualGraph,
    TextualRelationship,
    extract_textual_graph,
    match_image,
    parse_records,
    reformulate_question,
    render_extraction_prompt,
    render_matching_prompt,
    serialize_records,
)
from mkgrag.services.scenegraph import VisualGraph, ingest_scene_graph
from mkgrag.tests.helpers import (
    FUJI_MATCH_OUTPUT,
    FUJI_SCENE_GRAPH,
    FUJI_TEXTUAL_RECORDS,
    disable_logging,
)


class ParseRecordsTestCase(SimpleTestCase):
    def test_parse_worked_example_textual_block(self):
        batch = parse_records(FUJI_TEXTUAL_RECORDS)

        self.assertEqual(
            ["MOUNT FUJI", "HONSHU ISLAND", "CHERRY BLOSSOMS", "SHINKANSEN"],
            [entity.name for entity in batch.entities],
        )
        self.assertEqual([9.0, 8.0, 7.0], [r.strength for r in batch.relationships])
        self.assertEqual([], batch.matches)
        self.assertEqual([], batch.rejects)
        self.assertEqual("location", batch.entities[0].entity_type)
        self.assertEqual(
            "Mount Fuji is an active stratovolcano located on Japan's Honshu Island, "
            "with a peak elevation of 3,776.24 meters.",
            batch.entities[0].description,
        )

    def test_parse_worked_example_match_output(self):
        batch = parse_records(FUJI_MATCH_OUTPUT)

        self.assertEqual(
            [
                ImageMatch("MOUNT FUJI", 8.0),
                ObjectMatch("<object-3>", "MOUNT FUJI", 9.0),
                ObjectMatch("<object-0>", "SHINKANSEN", 7.0),
                RelationMatch("<relation-2>", "MOUNT FUJI", "SHINKANSEN", 7.0),
            ],
            batch.matches,
        )
        self.assertEqual([], batch.rejects)

    def test_strength_out_of_range_is_rejected(self):
        batch = parse_records('("entity"|A|x|a)\n("entity"|B|x|b)\n("relation"|A|B|related|15)')

        self.assertEqual([], batch.relationships)
        self.assertEqual(1, len(batch.rejects))
        self.assertEqual("strength out of range", batch.rejects[0].reason)

    def test_invalid_strength_is_rejected(self):
        batch = parse_records('("relationship"|A|B|related|strong)')

        self.assertEqual([], batch.relationships)
        self.assertEqual("invalid strength", batch.rejects[0].reason)

    def test_names_are_case_normalized(self):
        batch = parse_records('("entity"|  mount   fuji |location|A mountain.)')

        self.assertEqual("MOUNT FUJI", batch.entities[0].name)

    def test_wrong_field_count_is_rejected(self):
        batch = parse_records('("entity"|A|location)')

        self.assertEqual([], batch.entities)
        self.assertIn("wrong field count", batch.rejects[0].reason)

    def test_self_relationship_is_rejected(self):
        batch = parse_records('("entity"|A|x|a)\n("relationship"|A|a|loops|3)')

        self.assertEqual([], batch.relationships)
        self.assertEqual("source equals target", batch.rejects[0].reason)

    def test_dangling_relationship_is_flagged(self):
        batch = parse_records('("entity"|A|x|a)\n("relationship"|A|B|related|3)')

        self.assertEqual(1, len(batch.relationships))
        self.assertEqual(["dangling endpoint: B"], [r.reason for r in batch.dangling])
        self.assertEqual("dangling endpoint: B", batch.rejects[0].reason)

    def test_unknown_record_type_is_rejected(self):
        batch = parse_records('("event"|A|x)')

        self.assertIn("unknown record type", batch.rejects[0].reason)

    def test_non_record_lines_are_ignored(self):
        batch = parse_records("Here are the records:\n\n- (\"entity\"|A|x|a)\nDone.")

        self.assertEqual(1, len(batch.entities))
        self.assertEqual([], batch.rejects)

    def test_record_delimiter_and_completion_marker(self):
        raw = '("entity"<|>A<|>x<|>a)##("entity"<|>B<|>x<|>b)##("relationship"<|>A<|>B<|>ab<|>4)<|COMPLETE|>'

        batch = parse_records(raw)

        self.assertEqual(["A", "B"], [e.name for e in batch.entities])
        self.assertEqual(1, len(batch.relationships))

    def test_one_record_per_line_with_trailing_delimiter(self):
        raw = '("entity"<|>A<|>x<|>a)##\n("entity"<|>B<|>x<|>b)##\n("relationship"<|>A<|>B<|>ab<|>4)##\n<|COMPLETE|>'

        batch = parse_records(raw)

        self.assertEqual(["A", "B"], [e.name for e in batch.entities])
        self.assertEqual(["ab"], [r.description for r in batch.relationships])
        self.assertEqual([], batch.rejects)

    def test_delimiter_inside_description_is_kept(self):
        batch = parse_records('("entity"|A|x|issue ## 12 was fixed)##')

        self.assertEqual("issue ## 12 was fixed", batch.entities[0].description)

    def test_parse_bytes_and_empty_input(self):
        self.assertEqual(1, len(parse_records(b'("entity"|A|x|a)').entities))
        self.assertEqual(RecordBatch(), parse_records(""))
        self.assertEqual(RecordBatch(), parse_records(b""))

    def test_arbitrary_bytes_never_fail(self):
        rng = random.Random(7)
        fragments = [b"\xff\xfe", b"(", b")", b"|", b"<|>", b"##", b"\n", b'"entity"', b"relationship", b"<|COMPLETE|>", b"9"]

        for _ in range(2000):
            raw = b"".join(
                rng.choice(fragments) if rng.random() < 0.5 else bytes([rng.randint(0, 255)])
                for _ in range(rng.randint(0, 40))
            )

            batch = parse_records(raw)

            self.assertIsInstance(batch, RecordBatch)
            self.assertTrue(all(entity.name for entity in batch.entities))
        self.assertEqual(RecordBatch(), parse_records(b"\xff\xfe"))


class SerializeRecordsTestCase(SimpleTestCase):
    def test_serialize_empty_batch(self):
        self.assertEqual("", serialize_records(RecordBatch()))

    def test_worked_example_entities_round_trip(self):
        entities = parse_records(FUJI_TEXTUAL_RECORDS).entities

        text = serialize_records(RecordBatch(entities=entities))

        self.assertEqual(4, len(text.splitlines()))
        for line, entity in zip(text.splitlines(), entities):
            self.assertEqual([entity], parse_records(line).entities)

    def test_random_batches_round_trip(self):
        rng = random.Random(7)
        vocabulary = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta"]

        def phrase(count):
            return " ".join(rng.choice(vocabulary) for _ in range(count))

        for _ in range(10):
            names = sorted({phrase(2).upper() for _ in range(12)})
            batch = RecordBatch(
                entities=[TextualEntity(name, phrase(1), phrase(6)) for name in names],
            )
            while len(batch.entities) + len(batch.relationships) + len(batch.matches) < 100:
                source, target = rng.sample(names, 2)
                choice = rng.random()
                strength = rng.choice([0.0, 2.5, 7.0, 10.0, float(rng.randint(0, 10))])
                if choice < 0.5:
                    batch.relationships.append(
                        TextualRelationship(source, target, phrase(5), strength)
                    )
                elif choice < 0.7:
                    batch.matches.append(ImageMatch(source, strength))
                elif choice < 0.85:
                    batch.matches.append(
                        ObjectMatch(f"<object-{rng.randint(0, 9)}>", source, strength)
                    )
                else:
                    batch.matches.append(
                        RelationMatch(f"<relation-{rng.randint(0, 9)}>", source, target, strength)
                    )

            parsed = parse_records(serialize_records(batch))

            self.assertEqual(batch.entities, parsed.entities)
            self.assertEqual(batch.relationships, parsed.relationships)
            self.assertEqual(batch.matches, parsed.matches)
            self.assertEqual([], parsed.rejects)


class PromptTestCase(SimpleTestCase):
    def test_matching_prompt_layout(self):
        tg = parse_records(FUJI_TEXTUAL_RECORDS).textual_graph
        vg = ingest_scene_graph(json.dumps(FUJI_SCENE_GRAPH), "fuji")
        image = ImageAsset(image_id="fuji", uri="images/fuji.jpg")

        prompt = render_matching_prompt(image, tg, vg, exemplars=["EXEMPLAR BLOCK"])

        self.assertEqual(["images/fuji.jpg"], prompt.images)
        self.assertTrue(prompt.parts[0].is_text)
        self.assertFalse(prompt.parts[1].is_text)
        text = prompt.text
        lines = text.splitlines()
        self.assertEqual(4, len([l for l in lines if l.startswith("- <object-")]))
        self.assertEqual(3, len([l for l in lines if l.startswith("- <relation-")]))
        self.assertLess(text.index('("entity"|MOUNT FUJI'), text.index("- <object-0>"))
        self.assertLess(text.index("- <relation-2>"), text.index("EXEMPLAR BLOCK"))

    def test_matching_prompt_with_empty_scene_graph(self):
        tg = TextualGraph(entities=[TextualEntity("A", "x", "a")])
        image = ImageAsset(image_id="img")

        prompt = render_matching_prompt(image, tg, VisualGraph(image_id="img"), exemplars=[])

        lines = prompt.text.splitlines()
        self.assertEqual(1, len([l for l in lines if l.startswith('("entity"|')]))
        self.assertEqual(0, len([l for l in lines if l.startswith("- <object-")]))
        self.assertIn("Output:", prompt.text)

    def test_matching_without_exemplars(self):
        tg = TextualGraph(entities=[TextualEntity("A", "x", "a")])
        image = ImageAsset(image_id="img")
        backend = MockBackend(MockFixtures(fallback=""))

        prompt = render_matching_prompt(
            image, tg, VisualGraph(image_id="img"), exemplars=[]
        )
        batch = match_image(
            image, tg, VisualGraph(image_id="img"), backend, exemplars=[]
        )

        self.assertNotIn("SHINKANSEN", prompt.text)
        self.assertEqual([], batch.matches)

    def test_extraction_prompt_contains_text(self):
        prompt = render_extraction_prompt("The Eiffel Tower is in Paris.")

        self.assertIn("The Eiffel Tower is in Paris.", prompt.text)
        self.assertEqual([], prompt.images)


class ModelCallsTestCase(SimpleTestCase):
    def setUp(self):
        self.fixtures = MockFixtures()
        self.backend = MockBackend(self.fixtures)

    @disable_logging
    def test_extract_textual_graph(self):
        self.fixtures.add("extract", "Fuji", FUJI_TEXTUAL_RECORDS + FUJI_MATCH_OUTPUT)

        batch = extract_textual_graph("Fuji is a mountain on Honshu.", self.backend)

        self.assertEqual(4, len(batch.entities))
        self.assertEqual(3, len(batch.relationships))
        self.assertEqual([], batch.matches)

    def test_match_image(self):
        self.fixtures.add("match", "fuji", FUJI_MATCH_OUTPUT)
        tg = parse_records(FUJI_TEXTUAL_RECORDS).textual_graph
        vg = ingest_scene_graph(json.dumps(FUJI_SCENE_GRAPH), "fuji")

        batch = match_image(ImageAsset(image_id="fuji"), tg, vg, self.backend)

        self.assertEqual(4, len(batch.matches))
        self.assertEqual([], batch.entities)

    def test_reformulate_question(self):
        self.fixtures.add("reformulate", "renovated", "  X was renovated on <DATE>.  ")

        first = reformulate_question("When was X renovated?", self.backend)
        second = reformulate_question("When was X renovated?", self.backend)

        self.assertEqual("X was renovated on <DATE>.", first)
        self.assertEqual(first, second)

    def test_reformulate_empty_question(self):
        with self.assertRaisesMessage(RecordsError, "empty question"):
            reformulate_question("   ", self.backend)
