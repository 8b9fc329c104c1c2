"""
Django settings for the multimatch project.

Only the pieces the batch commands need are configured: the matching app,
templates for the plain-text reports and logging. There is no database.
"""

from pathlib import Path
from decouple import config
import os

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent


SECRET_KEY = config('SECRET_KEY', default='multimatch-batch-only')

DEBUG = config('DEBUG', default=False, cast=bool)

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'django.contrib.humanize',
    'matching',
]

TEMPLATES = [
    {
        'BACKEND': 'django.template.backends.django.DjangoTemplates',
        'DIRS': [],
        'APP_DIRS': True,
        'OPTIONS': {
            'autoescape': False,
            'context_processors': [],
        },
    },
]


# No persistence: datasets are read from CSV and results written back to CSV/JSON
DATABASES = {}


# Internationalization
LANGUAGE_CODE = 'en-us'
TIME_ZONE = 'UTC'
USE_I18N = False
USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


# ═══════════════════════════════════════════════════════════════
# MATCHING DEFAULTS
# ═══════════════════════════════════════════════════════════════

# Pair-table fan-out when the study config leaves matcher.workers unset
MULTIMATCH_WORKERS = config('MULTIMATCH_WORKERS', default=os.cpu_count() or 1, cast=int)

# Seconds per unit-level subproblem
MULTIMATCH_TIME_LIMIT = config('MULTIMATCH_TIME_LIMIT', default=10.0, cast=float)

# Largest number of matched pairs for the exact null distribution
MULTIMATCH_EXACT_MAX_K = config('MULTIMATCH_EXACT_MAX_K', default=200, cast=int)


# ═══════════════════════════════════════════════════════════════
# LOGGING
# ═══════════════════════════════════════════════════════════════

MULTIMATCH_LOG_LEVEL = config('MULTIMATCH_LOG_LEVEL', default='INFO')

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{asctime} {levelname} {name}: {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
    },
    'loggers': {
        'matching': {
            'handlers': ['console'],
            'level': MULTIMATCH_LOG_LEVEL,
            'propagate': False,
        },
    },
}
