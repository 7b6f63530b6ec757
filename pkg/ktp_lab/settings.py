"""
Django settings for the ktp_lab project.

The numerical library under ktpformer.lifting does not read settings; the
management commands pass the values below into it.
"""

from pathlib import Path

import dj_database_url
from decouple import config

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent


# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = config('SECRET_KEY', default='django-insecure-ktp-lab-local-development-key')

# SECURITY WARNING: don't run with debug turned on in production!
DEBUG = config('DEBUG', default=True, cast=bool)

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'django.contrib.admin',
    'django.contrib.auth',
    'django.contrib.contenttypes',
    'django.contrib.sessions',
    'django.contrib.messages',
    'django.contrib.staticfiles',
    'ktpformer',
]

MIDDLEWARE = [
    'django.middleware.security.SecurityMiddleware',
    'django.contrib.sessions.middleware.SessionMiddleware',
    'django.middleware.common.CommonMiddleware',
    'django.middleware.csrf.CsrfViewMiddleware',
    'django.contrib.auth.middleware.AuthenticationMiddleware',
    'django.contrib.messages.middleware.MessageMiddleware',
    'django.middleware.clickjacking.XFrameOptionsMiddleware',
]

ROOT_URLCONF = 'ktp_lab.urls'

TEMPLATES = [
    {
        'BACKEND': 'django.template.backends.django.DjangoTemplates',
        'DIRS': [],
        'APP_DIRS': True,
        'OPTIONS': {
            'context_processors': [
                'django.template.context_processors.request',
                'django.contrib.auth.context_processors.auth',
                'django.contrib.messages.context_processors.messages',
            ],
        },
    },
]

WSGI_APPLICATION = 'ktp_lab.wsgi.application'


# Database: the run registry. SQLite next to manage.py unless DATABASE_URL is set.

DATABASES = {
    'default': dj_database_url.parse(
        config('DATABASE_URL', default=f"sqlite:///{BASE_DIR / 'ktp_lab.sqlite3'}"),
        conn_max_age=0,
    )
}


LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = True

USE_TZ = True

STATIC_URL = 'static/'

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


# Lifting runs

# Overrides the seed of every run config and synthesis spec when set.
KTP_SEED = config('KTP_SEED', default=None, cast=lambda v: None if v in (None, '') else int(v))
# Threads computing per-clip gradients; a config's `workers` key wins when larger.
KTP_WORKERS = config('KTP_WORKERS', default=1, cast=int)
KTP_SLOW_TESTS = config('KTP_SLOW_TESTS', default=False, cast=bool)
KTP_CONFIG_DIR = BASE_DIR / 'configs'


# Logging

KTP_LOG_LEVEL = config('KTP_LOG_LEVEL', default='INFO')
KTP_LOG_JSON = config('KTP_LOG_JSON', default=False, cast=bool)
KTP_LOG_TIMESTAMPS = config('KTP_LOG_TIMESTAMPS', default=False, cast=bool)

_log_format = '%(levelname)s %(name)s: %(message)s'
if KTP_LOG_TIMESTAMPS:
    _log_format = '%(asctime)s ' + _log_format

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'plain': {
            'format': _log_format,
        },
        'json': {
            '()': 'pythonjsonlogger.jsonlogger.JsonFormatter',
            'format': _log_format,
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'json' if KTP_LOG_JSON else 'plain',
        },
    },
    'loggers': {
        'ktpformer': {
            'handlers': ['console'],
            'level': KTP_LOG_LEVEL,
            'propagate': False,
        },
    },
    'root': {
        'handlers': ['console'],
        'level': 'WARNING',
    },
}
