"""Model checkpoint codec.

Layout (little-endian)::

    magic "TRAVMODL" | u32 version | u32 D | u32 L | u32 hidden | u32 mlp_hidden
    | u32 activation code | f32 parameter blocks in PARAMETER_NAMES order (row-major)
"""
import logging
import struct

import numpy as np

from .exceptions import CheckpointFormatError
from .learner import PARAMETER_NAMES, ModelParams
from .protocol import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from .storage import atomic_open

logger = logging.getLogger(__name__)

HEADER = struct.Struct('<8s6I')
ACTIVATION_CODES = {'tanh': 0, 'linear': 1}


def save_checkpoint(path, params):
    with atomic_open(path, 'wb') as fh:
        fh.write(
            HEADER.pack(
                CHECKPOINT_MAGIC,
                CHECKPOINT_VERSION,
                params.feature_dim,
                params.latent_dim,
                params.hidden,
                params.mlp_hidden,
                ACTIVATION_CODES[params.activation],
            )
        )
        for name in PARAMETER_NAMES:
            fh.write(np.ascontiguousarray(params[name], dtype='<f4').tobytes())
    logger.debug("Checkpoint written", extra={'path': str(path)})


def load_checkpoint(path):
    """Read a checkpoint; parameters come back as float64 arrays."""
    with open(path, 'rb') as fh:
        raw = fh.read(HEADER.size)
        if len(raw) < HEADER.size:
            raise CheckpointFormatError("Checkpoint header is truncated.")
        magic, version, dim, latent, hidden, mlp_hidden, code = HEADER.unpack(raw)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointFormatError(
                "Not a model checkpoint (bad magic {!r}).".format(magic)
            )
        if version != CHECKPOINT_VERSION:
            raise CheckpointFormatError(
                "Unsupported checkpoint version {}.".format(version)
            )
        activations = {value: key for key, value in ACTIVATION_CODES.items()}
        if code not in activations:
            raise CheckpointFormatError("Unknown activation code {}.".format(code))
        if min(dim, latent, hidden, mlp_hidden) == 0:
            raise CheckpointFormatError("Checkpoint layer sizes must be positive.")

        arrays = {}
        shapes = ModelParams.expected_shapes(dim, latent, hidden, mlp_hidden)
        for name, shape in shapes.items():
            size = int(np.prod(shape)) * 4
            data = fh.read(size)
            if len(data) != size:
                raise CheckpointFormatError(
                    "Checkpoint ends inside block '{}'.".format(name)
                )
            block = np.frombuffer(data, dtype='<f4').reshape(shape)
            arrays[name] = block.astype(np.float64)
        if fh.read(1):
            raise CheckpointFormatError(
                "Trailing bytes after the last parameter block."
            )

    params = ModelParams(arrays, activations[code])
    if not params.is_finite():
        raise CheckpointFormatError("Checkpoint holds non-finite parameters.")
    return params
