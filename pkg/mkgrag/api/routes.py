from django.conf import settings
from rest_framework import status, viewsets
from rest_framework.decorators import action
from rest_framework.response import Response
from rest_framework.routers import SimpleRouter

from mkgrag.api.serializers import (
    ChatRequestSerializer,
    EmbeddingRequestSerializer,
    format_errors,
)
from mkgrag.services.backends import (
    BackendError,
    ChatRequest,
    EmbeddingRequest,
    MockBackend,
    NoFixtureError,
    Part,
    load_fixtures,
)


def get_mock_backend() -> MockBackend:
    # Fixtures are re-read when the file changes
    return MockBackend(fixtures=load_fixtures(settings.MKGRAG_MOCK_FIXTURES))


def _error(message: str, status_code: int) -> Response:
    return Response({"error": message}, status=status_code)


class ModelBackendViewSet(viewsets.ViewSet):
    """Serves the chat and embedding wire contract from the mock backend."""

    @action(methods=["post"], detail=False)
    def chat(self, request):
        serializer = ChatRequestSerializer(data=request.data)
        if not serializer.is_valid():
            return _error(format_errors(serializer.errors), status.HTTP_400_BAD_REQUEST)
        data = serializer.validated_data
        try:
            chat_request = ChatRequest(
                template_id=data["template_id"],
                parts=tuple(Part.from_dict(part) for part in data["parts"]),
                temperature=data["temperature"],
                seed=data["seed"],
            )
            text = get_mock_backend().chat_complete(chat_request)
        except NoFixtureError as error:
            return _error(str(error), status.HTTP_404_NOT_FOUND)
        except BackendError as error:
            return _error(str(error), status.HTTP_400_BAD_REQUEST)
        return Response({"text": text}, status=status.HTTP_200_OK)

    @action(methods=["post"], detail=False)
    def embed(self, request):
        serializer = EmbeddingRequestSerializer(data=request.data)
        if not serializer.is_valid():
            return _error(format_errors(serializer.errors), status.HTTP_400_BAD_REQUEST)
        data = serializer.validated_data
        try:
            embedding_request = EmbeddingRequest(
                role=data["role"],
                parts=tuple(Part.from_dict(part) for part in data["parts"]),
                dim=data.get("dim"),
            )
            vector = get_mock_backend().embed(embedding_request)
        except BackendError as error:
            return _error(str(error), status.HTTP_400_BAD_REQUEST)
        return Response({"values": vector.to_list()}, status=status.HTTP_200_OK)


backend_router = SimpleRouter(trailing_slash=False)
backend_router.register("", ModelBackendViewSet, basename="backend")
