from django.apps import AppConfig
from django.conf import settings


class DiffusionConfig(AppConfig):
    name = "diffusion"

    def ready(self):
        from . import numerics
        numerics.set_debug(bool(getattr(settings, "SIAMDIFF_DEBUG", False)))
