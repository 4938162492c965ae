"""Application configuration."""
import logging

from django.apps import AppConfig

logger = logging.getLogger(__name__)


class BaseConfig(AppConfig):
    """Application configuration."""

    name = 'continual_traversability'
    verbose_name = 'Continual traversability learning'

    def ready(self):
        """Perform application initialization."""
        # Fail early on malformed package settings.
        from .conf import get_traversability_settings

        settings = get_traversability_settings()
        logger.debug(
            "Continual traversability ready",
            extra={'output_root': settings['output_root']},
        )
