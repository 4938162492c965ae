"""Helpers shared by the experiment management commands."""
import contextlib
import logging

from django.core.management.base import BaseCommand, CommandError

from ..exceptions import ConfigurationError, TraversabilityError
from ..experiment import ExperimentConfig, output_directory
from ..serializers import read_config

logger = logging.getLogger(__name__)

EXIT_CONFIGURATION_ERROR = 1
EXIT_RUNTIME_ERROR = 2


@contextlib.contextmanager
def command_errors():
    """Map package errors onto command exit codes."""
    try:
        yield
    except ConfigurationError as error:
        raise CommandError(str(error), returncode=EXIT_CONFIGURATION_ERROR)
    except TraversabilityError as error:
        raise CommandError(str(error), returncode=EXIT_RUNTIME_ERROR)
    except OSError as error:
        raise CommandError(str(error), returncode=EXIT_RUNTIME_ERROR)


def comma_list(value, cast=str):
    return [cast(item.strip()) for item in value.split(',') if item.strip()]


class ExperimentCommand(BaseCommand):
    """Command reading an experiment configuration file."""

    def add_arguments(self, parser):
        parser.add_argument(
            '--config', required=True, help="Experiment configuration (JSON)."
        )
        parser.add_argument('--seed', type=int, help="Override the configured seed.")
        parser.add_argument('--out', help="Output directory.")
        parser.add_argument(
            '--quiet', action='store_true', help="Only report warnings."
        )

    def overrides(self, options):
        return {'seed': options.get('seed')}

    def load_config(self, options):
        if options.get('quiet'):
            options['verbosity'] = 0
            logging.getLogger('continual_traversability').setLevel(logging.WARNING)
        with command_errors():
            data = read_config(options['config'], self.overrides(options))
            return ExperimentConfig.from_validated(data)

    def output(self, config, options):
        return output_directory(config, options.get('out'))

    def say(self, options, message):
        if options.get('verbosity', 1) > 0:
            self.stdout.write(message)
