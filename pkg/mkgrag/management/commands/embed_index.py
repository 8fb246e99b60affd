from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from mkgrag.services.backends import BackendError, get_backend
from mkgrag.services.fusion import FusionError
from mkgrag.services.index import VectorIndexError, build_engine_index


class Command(BaseCommand):
    help = "Embeds the persisted knowledge graph documents and segments into a vector index"

    def add_arguments(self, parser):
        parser.add_argument("--kg", type=str, default=None, help="Knowledge graph folder")
        parser.add_argument("--out", type=str, default=None, help="Index file destination")
        parser.add_argument("--dim", type=int, default=None, help="Embedding dimension")

    def handle(self, *args, **options):
        kg_dir = options["kg"] or settings.MKGRAG_KG_FOLDER
        out = options["out"] or settings.MKGRAG_INDEX_FILE
        try:
            index = build_engine_index(kg_dir, get_backend(), dim=options["dim"])
            index.save(out)
        except (BackendError, FusionError, VectorIndexError, OSError) as error:
            raise CommandError(str(error)) from error
        self.stdout.write(self.style.SUCCESS(f"Indexed {len(index)} entries into {out}"))
