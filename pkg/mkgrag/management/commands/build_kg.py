from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from mkgrag.services.backends import BackendError, get_backend
from mkgrag.services.corpus import ChunkPolicy, CorpusError, load_corpus
from mkgrag.services.fusion import build_document_graph, save_document_graph
from mkgrag.services.records import RecordsError
from mkgrag.services.scenegraph import SceneGraphError


class Command(BaseCommand):
    help = "Builds one multimodal knowledge graph per document of a corpus file"

    def add_arguments(self, parser):
        parser.add_argument("--corpus", type=str, required=True, help="Corpus JSON lines file")
        parser.add_argument(
            "--out", type=str, default=None, help="Knowledge graph folder (default: MKGRAG_KG_FOLDER)"
        )
        parser.add_argument("--chunk-max-tokens", type=int, default=None)
        parser.add_argument("--chunk-min-tokens", type=int, default=None)
        parser.add_argument("--parallelism", type=int, default=None)
        parser.add_argument("--seed", type=int, default=None, help="Model seed (default: MKGRAG_SEED)")

    def handle(self, *args, **options):
        out = options["out"] or settings.MKGRAG_KG_FOLDER
        parallelism = options["parallelism"] or settings.MKGRAG_PARALLELISM
        seed = settings.MKGRAG_SEED if options["seed"] is None else options["seed"]
        try:
            policy = ChunkPolicy(
                max_tokens=options["chunk_max_tokens"] or settings.MKGRAG_CHUNK_MAX_TOKENS,
                min_tokens=options["chunk_min_tokens"] or settings.MKGRAG_CHUNK_MIN_TOKENS,
                include_headings=settings.MKGRAG_CHUNK_INCLUDE_HEADINGS,
            )
            corpus = load_corpus(options["corpus"])
            backend = get_backend()
        except (CorpusError, BackendError) as error:
            raise CommandError(str(error)) from error

        for reject in corpus.rejects:
            self.stdout.write(
                self.style.WARNING(f"Skipped line {reject.line_number}: {reject.reason}")
            )

        for document in corpus:
            try:
                kg, segments = build_document_graph(
                    document, corpus, backend, policy=policy, parallelism=parallelism, seed=seed
                )
            except (CorpusError, BackendError, RecordsError, SceneGraphError) as error:
                raise CommandError(f"{document.doc_id}: {error}") from error
            save_document_graph(kg, segments, out, title=document.title)
            self.stdout.write(
                f"{document.doc_id}: {len(kg.nodes)} entities, {len(kg.edges)} relationships, "
                f"{len(segments)} segments"
            )

        self.stdout.write(
            self.style.SUCCESS(f"Built {len(corpus)} knowledge graphs in {out}")
        )
