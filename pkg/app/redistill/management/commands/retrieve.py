import json

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from app.redistill import conf
from app.redistill.embedding import tokenize
from app.redistill.errors import RedistillError
from app.redistill.retrieval import RetrievalConfig, align_orientation, load_db, retrieve


class Command(BaseCommand):
  help = 'Retrieve and align the assets nearest to a prompt'

  def add_arguments(self, parser):
    parser.add_argument('--db', required=True)
    parser.add_argument('--prompt', required=True)
    parser.add_argument('--n', type=int, default=3)
    parser.add_argument('--n-prime', type=int, default=10)
    parser.add_argument('--mode', default='exact')
    parser.add_argument('--out')

  def handle(self, *args, **options):
    try:
      cfg = RetrievalConfig(n_prime=options['n_prime'], n=options['n'])
      index = load_db(options['db'], mode=options['mode'], db_poses=settings.REDISTILL_DB_POSE_GRID)
      result = retrieve(tokenize(options['prompt']), index, cfg)
      render_cfg = conf.render_config()
      assets = []
      for record in result.records:
        aligned, rotation, status = align_orientation(record, None, cfg, render_cfg)
        assets.append({'uid': record.uid, 'caption': ' '.join(record.caption_tokens),
                       'rotation': rotation, 'status': status, 'scene': aligned.to_json()})
    except (RedistillError, IOError) as e:
      raise CommandError(str(e))
    payload = {'prompt': options['prompt'], 'short': result.short, 'pool': list(result.pool),
               'assets': assets}
    if options['out']:
      with open(options['out'], 'w') as f:
        json.dump(payload, f, indent=2)
    for asset in assets:
      self.stdout.write('%s\t%s\t%s' % (asset['uid'], asset['status'], asset['caption']))
