"""
Django settings for sltmpc_project project.
"""

from pathlib import Path
import os

from decouple import config

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = config('SECRET_KEY', default='django-insecure-sltmpc-local-key-change-in-production')

DEBUG = config('DEBUG', default=False, cast=bool)

ALLOWED_HOSTS = []

# Application definition
INSTALLED_APPS = [
    'django.contrib.auth',
    'django.contrib.contenttypes',
    'rest_framework',
    'sltmpc_app',
]

# Database (run ledger only)
DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': config('SLTMPC_DATABASE_PATH', default=str(BASE_DIR / 'db.sqlite3')),
    }
}

# Internationalization
LANGUAGE_CODE = 'en-us'
TIME_ZONE = 'UTC'
USE_I18N = False
USE_TZ = True

# Default primary key field type
DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

# Numerical defaults. Not read from the environment: identical inputs must
# reproduce identical result files.
SLTMPC = {
    'LP_TOL': 1e-9,
    'SET_TOL': 1e-8,
    'MAX_ITER': 500,
    'MRPI_EPS': 1e-3,
    'RESIDUAL_TOL': 1e-7,
    'CONTAINMENT_TOL': 1e-6,
    'QP_SOLVER': 'CLARABEL',
    'SOLVER_OPTIONS': {
        'CLARABEL': {'tol_feas': 1e-9, 'tol_gap_abs': 1e-9, 'tol_gap_rel': 1e-9},
        'SCS': {'eps_abs': 1e-6, 'eps_rel': 1e-6, 'max_iters': 100000},
    },
    'SDP_SOLVERS': ('MOSEK', 'SCS'),
    'FAN_DIRECTIONS': 64,
    'WORKERS': 1,
    'RECORD_RUNS': True,
    'SCHEMA_VERSION': 1,
}

# Logging
SLTMPC_LOG_LEVEL = config('SLTMPC_LOG_LEVEL', default='INFO')

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
        'file': {
            'level': 'DEBUG',
            'class': 'logging.FileHandler',
            'filename': BASE_DIR / 'logs' / 'sltmpc.log',
            'formatter': 'verbose',
        },
        'console': {
            'level': 'WARNING',
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
    },
    'loggers': {
        'django': {
            'handlers': ['file'],
            'level': 'INFO',
            'propagate': True,
        },
        'sltmpc_app': {
            'handlers': ['file', 'console'],
            'level': SLTMPC_LOG_LEVEL,
            'propagate': False,
        },
    },
}

# Create logs directory if it doesn't exist
os.makedirs(BASE_DIR / 'logs', exist_ok=True)
