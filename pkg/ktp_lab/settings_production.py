"""
Production settings for ktp_lab: a shared registry database and the JSON
read API behind a proxy.
"""

from .settings import *
from decouple import config

DEBUG = False

ALLOWED_HOSTS = [
    '127.0.0.1',
    'localhost',
]

custom_domain = config('CUSTOM_DOMAIN', default='')
if custom_domain:
    ALLOWED_HOSTS.append(custom_domain)

SECURE_SSL_REDIRECT = config('SECURE_SSL_REDIRECT', default=False, cast=bool)
SECURE_PROXY_SSL_HEADER = ('HTTP_X_FORWARDED_PROTO', 'https')
SECURE_CONTENT_TYPE_NOSNIFF = True
X_FRAME_OPTIONS = 'DENY'
SESSION_COOKIE_SECURE = SECURE_SSL_REDIRECT
CSRF_COOKIE_SECURE = SECURE_SSL_REDIRECT

STATIC_ROOT = BASE_DIR / 'staticfiles'
STATIC_URL = '/static/'

MIDDLEWARE.insert(1, 'whitenoise.middleware.WhiteNoiseMiddleware')

# Structured logs by default in production
LOGGING['handlers']['console']['formatter'] = 'json' if config('KTP_LOG_JSON', default=True, cast=bool) else 'plain'

DATABASES['default']['CONN_MAX_AGE'] = 600
