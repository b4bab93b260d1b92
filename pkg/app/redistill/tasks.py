from celery import Celery
from celery._state import set_default_app
from celery.utils.log import get_task_logger

celery = Celery(__name__)
celery.config_from_object('django.conf:settings', namespace='CELERY')

# Force this app as the default so tasks called from other threads do not
# fall back to an unconfigured app and go looking for a broker.
set_default_app(celery)
logger = get_task_logger(__name__)


@celery.task(name='app.redistill.tasks.run_distillation')
def run_distillation(job):
  from .experiment import execute_job
  logger.info('Distilling "%s" seed %s (%s)' % (job['prompt'], job['seed'], job['variant']))
  return execute_job(job)
