"""
Django settings for the nsnlab project.

The project has no HTTP surface: it is driven entirely through management
commands (``python manage.py train|baseline|ablate|surgery|analyze``).
Nothing here is read from the environment, so identical configs and seeds
reproduce identical artifacts.
"""

from pathlib import Path

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# Unused (no sessions, no signing), but Django refuses an empty value.
SECRET_KEY = 'nsnlab-offline-experiment-harness'

DEBUG = False

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'nsn',
]

# No database: tests are SimpleTestCase and every artifact lives in files.
DATABASES = {}


# Internationalization

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True


# Logging

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'plain': {
            'format': '{asctime} {levelname} {name}: {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'plain',
        },
    },
    'loggers': {
        'nsn': {
            'handlers': ['console'],
            'level': 'INFO',
            'propagate': False,
        },
    },
}


# Experiment harness

# Desk-scale recipe used when --config is omitted.
NSN_DEFAULT_CONFIG = BASE_DIR / 'configs' / 'desk.json'

# Default output directory when neither --out nor output_dir is given.
NSN_DEFAULT_OUTPUT_DIR = BASE_DIR / 'runs'
