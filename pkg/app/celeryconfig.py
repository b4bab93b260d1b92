import os

CELERY_BROKER_URL = os.environ.get('CELERY_BROKER_URL', 'memory://')
CELERY_RESULT_BACKEND = os.environ.get('CELERY_RESULT_BACKEND', 'cache+memory://')
CELERY_TASK_ALWAYS_EAGER = os.environ.get('CELERY_ALWAYS_EAGER', 'true').lower() in ('1', 'true', 'yes')
CELERY_TASK_EAGER_PROPAGATES = True
CELERY_IMPORTS = ('app.redistill.tasks', )
CELERY_TASK_SERIALIZER = "json"
CELERY_RESULT_SERIALIZER = "json"
CELERY_ACCEPT_CONTENT = ['json']

CELERY_TIMEZONE = 'UTC'
