import contextlib
import os
import tempfile


@contextlib.contextmanager
def atomic_open(path, mode='w'):
    """Open a temporary sibling of ``path`` and move it into place on success.

    Interrupted writes never leave a truncated file at ``path``.
    """
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, temp_path = tempfile.mkstemp(
        prefix='.{}.'.format(os.path.basename(path)), suffix='.tmp', dir=directory
    )
    try:
        kwargs = {} if 'b' in mode else {'newline': '', 'encoding': 'utf8'}
        with os.fdopen(fd, mode, **kwargs) as fh:
            yield fh
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(temp_path, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.remove(temp_path)
        raise
