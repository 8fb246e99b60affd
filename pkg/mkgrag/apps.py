from django.apps import AppConfig


class MkgragConfig(AppConfig):
    name = "mkgrag"
    verbose_name = "Multimodal knowledge-graph RAG"
