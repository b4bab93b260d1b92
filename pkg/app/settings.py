import os

settings_dir = os.path.dirname(__file__)
PROJECT_ROOT = os.path.abspath(os.path.dirname(settings_dir))

DEBUG = os.environ.get("DEBUG", False)

ADMINS = (
  ('Admin', os.environ.get('ADMIN_EMAIL', 'name@example.com')),
)

# The engine keeps no state in a database.
DATABASES = {}

USE_TZ = True

TIME_ZONE = 'UTC'

LANGUAGE_CODE = 'en-us'

USE_I18N = False

# Make this unique, and don't share it with anybody.
SECRET_KEY = os.environ.get('DJANGO_SECRET_KEY', 'redistill-local-only-8Hq2vR0xWkT4mZp6LcYd1NbJ')

INSTALLED_APPS = (
    'app.redistill',
)

LOGGING = {
    'version': 1,
    'disable_existing_loggers': True,
    'formatters': {
        'verbose': {
            'format': '%(levelname)s %(asctime)s %(module)s %(process)d %(thread)d %(message)s'
        },
        'simple': {
            'format': '%(levelname)s %(message)s'
        },
    },
    'handlers': {
        'console': {
            'level': 'DEBUG',
            'class': 'logging.StreamHandler',
            'formatter': 'simple'
        },
    },
    'loggers': {
        'app.redistill': {
            'handlers': ['console'],
            'level': os.environ.get('REDISTILL_LOG_LEVEL', 'INFO'),
            'propagate': False,
        },
        'celery': {
            'handlers': ['console'],
            'level': 'WARNING',
            'propagate': False,
        },
        # Catch All Logger -- Captures any other logging
        '': {
            'handlers': ['console'],
            'level': 'WARNING',
            'propagate': True,
        }
    }
}

if os.environ.get('LOG_FILE'):
  LOGGING['handlers']['log_file'] = {
      'level': 'DEBUG',
      'class': 'logging.handlers.RotatingFileHandler',
      'formatter': 'verbose',
      'filename': os.environ['LOG_FILE'],
      'maxBytes': 1024 * 1024 * 25,  # 25 MB
      'backupCount': 5,
  }
  for logger in LOGGING['loggers'].values():
    logger['handlers'].append('log_file')

from app.celeryconfig import *
from app.redistill_config import *
