import os

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from app.redistill import conf
from app.redistill.adapter import AdaptConfig
from app.redistill.embedding import tokenize
from app.redistill.engine import distill
from app.redistill.errors import RedistillError
from app.redistill.experiment import prompt_exemplar
from app.redistill.retrieval import load_db
from app.redistill.synthetic import biased_target_builder


class Command(BaseCommand):
  help = 'Distill particles for one prompt against an asset database'

  def add_arguments(self, parser):
    parser.add_argument('--db', required=True)
    parser.add_argument('--prompt', required=True)
    parser.add_argument('--out', required=True)
    parser.add_argument('--iterations', type=int, default=2000)
    parser.add_argument('--particles', type=int, default=2)
    parser.add_argument('--seed', type=int, default=0)
    parser.add_argument('--mode', default='vsd', choices=('vsd', 'sds'))
    parser.add_argument('--adapt-steps', type=int, default=AdaptConfig.steps)
    parser.add_argument('--asset', action='append', dest='assets',
                        help='use this database uid instead of retrieving (repeatable)')

  def handle(self, *args, **options):
    try:
      cfg = conf.distill_config({'iterations': options['iterations'],
                                 'n_particles': options['particles'],
                                 'seed': options['seed'], 'mode': options['mode'],
                                 'adapt': {'steps': options['adapt_steps']}})
      render_cfg = conf.render_config()
      index = load_db(options['db'], db_poses=settings.REDISTILL_DB_POSE_GRID)
      tokens = tokenize(options['prompt'])
      builder = biased_target_builder(prompt_exemplar(tokens, index, render_cfg), render_cfg)
      particles, log = distill(cfg, tokens, index, builder, render_cfg, asset_uids=options['assets'])
    except (RedistillError, IOError) as e:
      raise CommandError(str(e))
    os.makedirs(options['out'], exist_ok=True)
    log.save(os.path.join(options['out'], 'runlog.csv'))
    for i, particle in enumerate(particles):
      particle.save(os.path.join(options['out'], 'particle-%d.json' % i))
    self.stdout.write('Wrote %d particles and %d log rows to %s'
                      % (len(particles), len(log), options['out']))
