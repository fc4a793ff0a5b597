"""
Error mapping for management commands
"""
from functools import wraps

from django.core.exceptions import ValidationError
from django.core.management.base import CommandError

from .exceptions import ConfigurationError, DataError, NsnError


def command_errors(handle):
    """
    Decorator turning library errors into CommandError with the documented
    exit code: 2 config, 3 data, 4 numerical.
    Usage: @command_errors on BaseCommand.handle
    """
    @wraps(handle)
    def wrapper(self, *args, **options):
        try:
            return handle(self, *args, **options)
        except CommandError:
            raise
        except NsnError as exc:
            raise CommandError(f'{type(exc).__name__}: {exc}', returncode=exc.exit_code) from exc
        except ValidationError as exc:
            raise CommandError('invalid configuration:\n  ' + '\n  '.join(exc.messages),
                               returncode=ConfigurationError.exit_code) from exc
        except OSError as exc:
            raise CommandError(f'I/O error: {exc}', returncode=DataError.exit_code) from exc

    return wrapper
