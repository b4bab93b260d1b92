import json
import os

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from app.redistill.errors import RedistillError
from app.redistill.experiment import run_experiment

DEMO_PROMPTS = ['wooden chair', 'brass lamp']


def demo_config(seed, output_dir):
  return {
    'prompts': DEMO_PROMPTS,
    'seeds': [seed],
    'output_dir': output_dir,
    'metric_poses': 24,
    'distill': {
      'n_particles': 2,
      'iterations': 60,
      'lr': 2e-3,
      'n_poses': 8,
      'warmup': {'tau': 30, 'pose_batch': 2},
      'retrieval': {'n_prime': 5, 'n': 2},
    },
    'adapt': {'steps': 40, 'n_poses': 8, 'early_stop_patience': 10},
  }


class Command(BaseCommand):
  help = 'End-to-end run on the bundled synthetic database'

  def add_arguments(self, parser):
    parser.add_argument('--out', default=os.path.join(settings.REDISTILL_OUTPUT_DIR, 'demo'))
    parser.add_argument('--seed', type=int, default=0)

  def handle(self, *args, **options):
    out = options['out']
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, 'config.json')
    with open(path, 'w') as f:
      json.dump(demo_config(options['seed'], out), f, indent=2)
    try:
      result = run_experiment(path)
    except RedistillError as e:
      raise CommandError(str(e))
    self.stdout.write('Wrote %d artifacts, report at %s' % (
      len(result.artifacts), os.path.join(out, 'report.csv')))
