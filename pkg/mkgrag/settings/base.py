"""
Django settings for the mkgrag engine.

The engine is driven from management commands (build_kg, embed_index, query,
eval). The HTTP surface only serves the model backend wire contract
(/v1/chat, /v1/embed) through the mock backend, for offline deployments and
tests.

Every tunable can be set through an MKGRAG_* environment variable.
"""

import os

# Build paths inside the project like this: os.path.join(BASE_DIR, ...)
BASE_DIR = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = "mkgrag-insecure-0v9$w@c^3m1l2z8r!q7k5x#n4d6f0b2h8j1g"

# SECURITY WARNING: don't run with debug turned on in production!
DEBUG = False

ALLOWED_HOSTS = ["*"]

# Application definition

INSTALLED_APPS = [
    "mkgrag.apps.MkgragConfig",
    "django.contrib.contenttypes",
    "django.contrib.auth",
    "rest_framework",
]

MIDDLEWARE = [
    "django.middleware.security.SecurityMiddleware",
    "django.middleware.common.CommonMiddleware",
]

ROOT_URLCONF = "mkgrag.urls"

TEMPLATES = []

DEFAULT_AUTO_FIELD = "django.db.models.AutoField"

WSGI_APPLICATION = "mkgrag.wsgi.application"

# The engine keeps its artifacts (knowledge graphs, vector index, reports) on
# disk and does not use a database.
DATABASES = {}

LANGUAGE_CODE = "en-us"

TIME_ZONE = os.getenv("TZ", "UTC")

USE_I18N = False

USE_TZ = True

# REST framework, only used for the backend wire contract
REST_FRAMEWORK = {
    "DEFAULT_AUTHENTICATION_CLASSES": [],
    "DEFAULT_PERMISSION_CLASSES": ["rest_framework.permissions.AllowAny"],
    "DEFAULT_RENDERER_CLASSES": ["rest_framework.renderers.JSONRenderer"],
    "DEFAULT_PARSER_CLASSES": ["rest_framework.parsers.JSONParser"],
    "UNAUTHENTICATED_USER": None,
}


def _env_flag(name: str, default: bool) -> bool:
    return os.getenv(name, default) in (True, "True", "true", "1")


# Artifacts folder: knowledge graphs, vector index, reports
MKGRAG_DATA_DIR = os.getenv("MKGRAG_DATA_DIR", os.path.join(BASE_DIR, "data"))
MKGRAG_KG_FOLDER = os.path.join(MKGRAG_DATA_DIR, "kg")
MKGRAG_INDEX_FILE = os.path.join(MKGRAG_DATA_DIR, "index.bin")

# Model backends
# "mock" serves deterministic fixtures and hash embeddings, "http" talks to a
# remote service speaking the /v1/chat + /v1/embed contract.
MKGRAG_BACKEND = os.getenv("MKGRAG_BACKEND", "mock")
MKGRAG_BACKEND_URL = os.getenv("MKGRAG_BACKEND_URL", "")
# "native" uses /v1/chat and /v1/embed, "openai" maps onto
# /v1/chat/completions and /v1/embeddings
MKGRAG_BACKEND_PROFILE = os.getenv("MKGRAG_BACKEND_PROFILE", "native")
MKGRAG_BACKEND_TIMEOUT_SEC = float(os.getenv("MKGRAG_BACKEND_TIMEOUT_SEC", 60))
MKGRAG_BACKEND_MAX_IN_FLIGHT = int(os.getenv("MKGRAG_BACKEND_MAX_IN_FLIGHT", 4))
MKGRAG_CHAT_MODEL = os.getenv("MKGRAG_CHAT_MODEL", "")
MKGRAG_EMBEDDING_MODEL = os.getenv("MKGRAG_EMBEDDING_MODEL", "")
MKGRAG_MOCK_FIXTURES = os.getenv(
    "MKGRAG_MOCK_FIXTURES", os.path.join(MKGRAG_DATA_DIR, "fixtures.json")
)
MKGRAG_MOCK_FALLBACK = os.getenv("MKGRAG_MOCK_FALLBACK", None)
MKGRAG_EMBEDDING_DIM = int(os.getenv("MKGRAG_EMBEDDING_DIM", 256))

# Segmentation
MKGRAG_CHUNK_MAX_TOKENS = int(os.getenv("MKGRAG_CHUNK_MAX_TOKENS", 512))
MKGRAG_CHUNK_MIN_TOKENS = int(os.getenv("MKGRAG_CHUNK_MIN_TOKENS", 64))
MKGRAG_CHUNK_INCLUDE_HEADINGS = _env_flag("MKGRAG_CHUNK_INCLUDE_HEADINGS", True)

# Dual-stage retrieval
MKGRAG_K_D = int(os.getenv("MKGRAG_K_D", 10))
MKGRAG_K_G = int(os.getenv("MKGRAG_K_G", 10))
MKGRAG_HOPS = int(os.getenv("MKGRAG_HOPS", 1))
MKGRAG_RHO = float(os.getenv("MKGRAG_RHO", 0.9))
MKGRAG_CONTEXT_BUDGET = int(os.getenv("MKGRAG_CONTEXT_BUDGET", 4096))
MKGRAG_REFORMULATE_QUESTION = _env_flag("MKGRAG_REFORMULATE_QUESTION", False)

# Retriever objectives
MKGRAG_TEMPERATURE_TAU = float(os.getenv("MKGRAG_TEMPERATURE_TAU", 0.07))
MKGRAG_KL_ALPHA = float(os.getenv("MKGRAG_KL_ALPHA", 2.0))

# Experiments
MKGRAG_PARALLELISM = int(os.getenv("MKGRAG_PARALLELISM", 1))
MKGRAG_SEED = int(os.getenv("MKGRAG_SEED", 0))

# Prompt templates
MKGRAG_PROMPT_FOLDER = os.getenv(
    "MKGRAG_PROMPT_FOLDER", os.path.join(BASE_DIR, "mkgrag", "prompts")
)
