import copy
import os

from django.conf import settings

from .protocol import OUTPUT_ROOT_ENV


def get_traversability_settings():
    """Package runtime configuration."""
    defaults = {
        # Default root for run directories when no explicit output is given.
        'output_root': os.environ.get(OUTPUT_ROOT_ENV, 'runs'),
        # Frames or steps going over these limits will emit warnings.
        'warnings': {'max_frame_seconds': 5.0, 'max_gradient_norm': 1e3},
        # Footprint projection defaults used when annotating recorded sessions.
        'projection': {'d_max': 10.0, 'z_min': 0.05, 'future_only': True},
    }
    overrides = getattr(settings, 'CONTINUAL_TRAVERSABILITY', {})
    merged = copy.deepcopy(defaults)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key].update(value)
        else:
            merged[key] = value
    return merged
