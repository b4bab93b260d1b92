from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from app.redistill import conf
from app.redistill.adapter import AdaptConfig, adapt, save_checkpoint
from app.redistill.embedding import tokenize
from app.redistill.errors import RedistillError
from app.redistill.experiment import prompt_exemplar
from app.redistill.retrieval import RetrievalConfig, align_orientation, load_db, retrieve
from app.redistill.synthetic import biased_target_builder


class Command(BaseCommand):
  help = 'Adapt the prior to the assets retrieved for a prompt and write a checkpoint'

  def add_arguments(self, parser):
    parser.add_argument('--db', required=True)
    parser.add_argument('--prompt', required=True)
    parser.add_argument('--out', required=True)
    parser.add_argument('--steps', type=int, default=AdaptConfig.steps)
    parser.add_argument('--lr', type=float, default=AdaptConfig.lr)
    parser.add_argument('--seed', type=int, default=0)
    parser.add_argument('--frozen-prefixes', action='store_true')

  def handle(self, *args, **options):
    try:
      cfg = AdaptConfig(steps=options['steps'], lr=options['lr'], seed=options['seed'],
                        learn_prefixes=not options['frozen_prefixes'])
      render_cfg = conf.render_config()
      index = load_db(options['db'], db_poses=settings.REDISTILL_DB_POSE_GRID)
      tokens = tokenize(options['prompt'])
      retrieval_cfg = RetrievalConfig()
      records = retrieve(tokens, index, retrieval_cfg).records
      aligned = [r.with_scene(align_orientation(r, None, retrieval_cfg, render_cfg).aligned)
                 for r in records]
      builder = biased_target_builder(prompt_exemplar(tokens, index, render_cfg), render_cfg)
      adapter, prefixes, curve = adapt(aligned, builder, cfg, render_cfg)
      save_checkpoint(options['out'], adapter, prefixes)
    except (RedistillError, IOError) as e:
      raise CommandError(str(e))
    self.stdout.write('Adapted on %d assets, kept step %d of %d' % (
      len(aligned), adapter.stopped_step, len(curve) - 1 if curve else 0))
