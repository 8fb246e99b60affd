from django.urls import include, path

from mkgrag.api import routes as api_routes

urlpatterns = [
    # Model backend wire contract, served by the mock backend
    path("v1/", include(api_routes.backend_router.urls)),
]
