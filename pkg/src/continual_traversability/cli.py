"""Standalone ``continual-traversability`` command line.

Configures a minimal Django project when none is configured and forwards
subcommands to the management commands.
"""
import sys

import django
from django.conf import settings
from django.core.management import execute_from_command_line

SUBCOMMANDS = {
    'run': 'runexperiment',
    'compare': 'comparestrategies',
    'sweep-lambda': 'sweeplambda',
    'annotate': 'annotatesession',
    'inspect-memory': 'inspectmemory',
}

USAGE = "usage: continual-traversability {{{}}} [options]".format(','.join(SUBCOMMANDS))


def logging_config(quiet=False):
    return {
        'version': 1,
        'disable_existing_loggers': False,
        'formatters': {
            'plain': {'format': '%(asctime)s %(levelname)s %(name)s: %(message)s'}
        },
        'handlers': {
            'console': {'class': 'logging.StreamHandler', 'formatter': 'plain'}
        },
        'loggers': {
            'continual_traversability': {
                'handlers': ['console'],
                'level': 'WARNING' if quiet else 'INFO',
            }
        },
    }


def configure(quiet=False):
    if not settings.configured:
        settings.configure(
            INSTALLED_APPS=['rest_framework', 'continual_traversability'],
            LOGGING=logging_config(quiet),
            USE_TZ=True,
        )
    django.setup()


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] in ('-h', '--help'):
        sys.stdout.write(USAGE + '\n')
        return 0
    command = SUBCOMMANDS.get(argv[0])
    if command is None:
        sys.stderr.write("Unknown subcommand '{}'.\n{}\n".format(argv[0], USAGE))
        return 1

    configure(quiet='--quiet' in argv)
    execute_from_command_line(['continual-traversability', command] + argv[1:])
    return 0


if __name__ == '__main__':
    sys.exit(main())
