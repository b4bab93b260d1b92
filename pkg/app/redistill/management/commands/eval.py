from django.core.management.base import BaseCommand, CommandError

from app.redistill.errors import RedistillError
from app.redistill.experiment import run_experiment, summarize


class Command(BaseCommand):
  help = 'Run an experiment described by a JSON config and write its reports'

  def add_arguments(self, parser):
    parser.add_argument('config')
    parser.add_argument('--out', help='overrides output_dir from the config')

  def handle(self, *args, **options):
    try:
      result = run_experiment(options['config'], output_dir=options['out'])
    except (RedistillError, IOError) as e:
      raise CommandError(str(e))
    for name, report in result.reports.items():
      medians = summarize(report)
      self.stdout.write('%s: %d rows, %s' % (
        name, len(report), ', '.join('%s=%.4f' % item for item in medians.items())))
