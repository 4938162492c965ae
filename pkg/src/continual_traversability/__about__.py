"""Central place for package metadata."""

from importlib.metadata import PackageNotFoundError, version

# NOTE: We use __title__ instead of simply __name__ since the latter would
#       interfere with a global variable __name__ denoting object's name.
__title__ = 'django-continual-traversability'
__summary__ = 'Continual traversability learning with an incremental replay memory'
__url__ = 'https://github.com/continual-traversability/django-continual-traversability'

try:
    __version__ = version(__title__)
except PackageNotFoundError:
    # Package is not (yet) installed.
    __version__ = '0.0.0.dev0'

__author__ = 'Continual Traversability Developers'
__email__ = 'dev-team@continual-traversability.org'

__license__ = 'Apache License (2.0)'
__copyright__ = '2024-2026, ' + __author__

__all__ = [
    "__title__",
    "__summary__",
    "__url__",
    "__version__",
    "__author__",
    "__email__",
    "__license__",
    "__copyright__",
]
