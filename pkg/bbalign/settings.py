"""
Django settings for the bbalign project.

The project has no database tables and serves no HTTP requests: Django provides
configuration, logging setup and the management-command framework that hosts
the `align` CLI. Every tunable is read from the environment (or a .env file)
through python-decouple.
"""

from pathlib import Path
from decouple import config, Csv  # For reading environment variables from .env file


# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent


# Development default; nothing is signed or served.
SECRET_KEY = config('SECRET_KEY', default='bbalign-dev-only-secret')

DEBUG = config('DEBUG', default=True, cast=bool)

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'alignment.apps.AlignmentAppConfig',
    'rest_framework',  # Serializers and JSON rendering for alignment results
]

MIDDLEWARE = []

# Nothing is persisted; results and traces are written as files.
DATABASES = {}

LANGUAGE_CODE = "en-us"

TIME_ZONE = "UTC"

USE_I18N = False

USE_TZ = True

DEFAULT_AUTO_FIELD = "django.db.models.BigAutoField"

# Django REST Framework settings
# Only serializers and the JSON renderer are used.
REST_FRAMEWORK = {
    'UNAUTHENTICATED_USER': None,
    'DEFAULT_AUTHENTICATION_CLASSES': [],
    'DEFAULT_PERMISSION_CLASSES': [],
    'COMPACT_JSON': True,
    'STRICT_JSON': True,
}


# Alignment defaults
# CLI flags override every value here; see AlignmentConfig.from_settings().
ALIGNMENT = {
    # Search depths (the rotational/translational tolerance flags convert to depths)
    'ROT_DEPTH': config('ALIGN_ROT_DEPTH', default=11, cast=int),
    'TRANS_DEPTH': config('ALIGN_TRANS_DEPTH', default=10, cast=int),

    # DP-vMF-means scale sweep (degrees) and DP-means scale
    'LAMBDA_DEG': config('ALIGN_LAMBDA_DEG', default='45,65,80', cast=Csv(float)),
    'LAMBDA_X_FRACTION': config('ALIGN_LAMBDA_X_FRACTION', default=0.15, cast=float),

    # Preprocessing
    'KNN_K': config('ALIGN_KNN_K', default=10, cast=int),

    # Branch and bound
    'THREADS': config('ALIGN_THREADS', default=4, cast=int),
    'CANDIDATE_SLACK': config('ALIGN_CANDIDATE_SLACK', default=1e-3, cast=float),
    'MAX_CANDIDATES': config('ALIGN_MAX_CANDIDATES', default=8, cast=int),
    'GAP_TOL': config('ALIGN_GAP_TOL', default=0.0, cast=float),
    'MAX_ITERATIONS': config('ALIGN_MAX_ITERATIONS', default=200000, cast=int),
    'CANDIDATE_DEDUP_DEG': config('ALIGN_CANDIDATE_DEDUP_DEG', default=0.5, cast=float),
    # 'radius' pair bounds are guaranteed; 'cone' bounds are tighter but can undershoot
    'ROT_EXTREMA': config('ALIGN_ROT_EXTREMA', default='radius'),

    # Mixture fitting
    'TAU_MIN': config('ALIGN_TAU_MIN', default=1e-2, cast=float),
    'TAU_MAX': config('ALIGN_TAU_MAX', default=1e3, cast=float),
    'SIGMA_FLOOR_SCALE': config('ALIGN_SIGMA_FLOOR_SCALE', default=1e-3, cast=float),
}

# Versioned binary cache of the 600-cell (see alignment.services.tess_s3)
TESSELLATION_CACHE = Path(config('TESSELLATION_CACHE', default=str(BASE_DIR / 'var' / 's3tess.bin')))


# Structured logging: JSON format for production, console for local dev
# LOG_FORMAT=json switches the console handler to one JSON object per line,
# which is how BB trace records are meant to be collected.
LOG_LEVEL = config('LOG_LEVEL', default='INFO')
LOG_FORMAT = config('LOG_FORMAT', default='console' if DEBUG else 'json')

_log_formatters = {
    'console': {
        'format': '[%(asctime)s] %(levelname)s %(name)s: %(message)s',
    },
    'json': {
        '()': 'pythonjsonlogger.jsonlogger.JsonFormatter',
        'format': '%(asctime)s %(levelname)s %(name)s %(message)s',
    },
}

_log_handlers = {
    'console': {
        'class': 'logging.StreamHandler',
        'formatter': 'json' if LOG_FORMAT == 'json' else 'console',
    },
}

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': _log_formatters,
    'handlers': _log_handlers,
    'loggers': {
        'django': {
            'handlers': ['console'],
            'level': 'WARNING',
            'propagate': False,
        },
        'alignment': {
            'handlers': ['console'],
            'level': LOG_LEVEL,
            'propagate': False,
        },
    },
    'root': {
        'handlers': ['console'],
        'level': 'WARNING',
    },
}
