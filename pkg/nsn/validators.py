from pathlib import Path

from django.core.exceptions import ValidationError

U64_LIMIT = 2 ** 64


def validate_seed(value):
    if isinstance(value, bool) or not isinstance(value, int) or not 0 <= value < U64_LIMIT:
        raise ValidationError(f'Seed must be an unsigned 64-bit integer, got {value!r}.')


def validate_positive(value):
    if value is not None and value <= 0:
        raise ValidationError(f'Must be positive, got {value}.')


def validate_non_negative(value):
    if value is not None and value < 0:
        raise ValidationError(f'Must be non-negative, got {value}.')


def validate_momentum(value):
    if value is not None and not 0 <= value < 1:
        raise ValidationError(f'Momentum must lie in [0, 1), got {value}.')


def validate_rank_list(values):
    bad = [v for v in values if v < 1]
    if bad:
        raise ValidationError(f'Ranks must be positive integers, got {bad}.')


def validate_existing_file(value):
    if value and not Path(value).is_file():
        raise ValidationError(f'File not found: {value}.')
