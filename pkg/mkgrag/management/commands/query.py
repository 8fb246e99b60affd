import json

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from mkgrag.services.answering import generate_answer
from mkgrag.services.backends import BackendError, get_backend
from mkgrag.services.corpus import ImageAsset
from mkgrag.services.fusion import FusionError
from mkgrag.services.index import VectorIndex, VectorIndexError
from mkgrag.services.retrieval import MODES, Query, RetrievalError, RetrievalPipeline


class Command(BaseCommand):
    help = "Answers one image-question pair with dual-stage retrieval"

    def add_arguments(self, parser):
        parser.add_argument("--question", type=str, required=True)
        parser.add_argument("--image", type=str, default="", help="Image id")
        parser.add_argument("--image-uri", type=str, default="")
        parser.add_argument("--k-d", type=int, default=None)
        parser.add_argument("--k-g", type=int, default=None)
        parser.add_argument("--hops", type=int, default=None)
        parser.add_argument("--rho", type=float, default=None)
        parser.add_argument("--budget", type=int, default=None)
        parser.add_argument("--mode", choices=MODES, default="graph")
        parser.add_argument("--reformulate", action="store_true", default=None)
        parser.add_argument("--kg", type=str, default=None, help="Knowledge graph folder")
        parser.add_argument("--index", type=str, default=None, help="Index file")
        parser.add_argument("--seed", type=int, default=None, help="Model seed (default: MKGRAG_SEED)")
        parser.add_argument("--json", action="store_true", help="Print the result as JSON")

    def handle(self, *args, **options):
        try:
            index = VectorIndex.load(options["index"] or settings.MKGRAG_INDEX_FILE)
            backend = get_backend()
            pipeline = RetrievalPipeline(
                index,
                backend,
                kg_dir=options["kg"],
                k_d=options["k_d"],
                k_g=options["k_g"],
                hops=options["hops"],
                rho=options["rho"],
                budget=options["budget"],
                mode=options["mode"],
                reformulate=options["reformulate"],
            )
            image = (
                ImageAsset(image_id=options["image"], uri=options["image_uri"])
                if options["image"]
                else None
            )
            query = Query(question=options["question"], image=image)
            result = pipeline.retrieve(query)
            seed = settings.MKGRAG_SEED if options["seed"] is None else options["seed"]
            answer = generate_answer(query, result.context, backend, seed=seed)
        except (BackendError, FusionError, RetrievalError, VectorIndexError) as error:
            raise CommandError(str(error)) from error

        if options["json"]:
            self.stdout.write(
                json.dumps(
                    {
                        "question": query.question,
                        "documents": [
                            {"doc_id": hit.item_id, "score": hit.score}
                            for hit in result.document_hits
                        ],
                        "graph_context": result.context.graph_block,
                        "segment_context": result.context.segment_block,
                        "token_count": result.context.token_count,
                        "answer": answer,
                    },
                    indent=2,
                )
            )
            return

        self.stdout.write("Documents:")
        for rank, hit in enumerate(result.document_hits, start=1):
            self.stdout.write(f"  {rank}. {hit.item_id} ({hit.score:.4f})")
        self.stdout.write("Knowledge graph:")
        self.stdout.write(result.context.graph_block or "  (none)")
        self.stdout.write("Passages:")
        self.stdout.write(result.context.segment_block or "  (none)")
        self.stdout.write(self.style.SUCCESS(f"Answer: {answer}"))
