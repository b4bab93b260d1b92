import csv
import io
import json
import os
import tempfile
from collections import OrderedDict

from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, override_settings
from mock import patch

from app.redistill import conf
from app.redistill.adapter import load_checkpoint
from app.redistill.engine import DistillConfig
from app.redistill.errors import ConfigError
from app.redistill.experiment import MetricsReport, build_jobs, run_experiment, slugify, summarize
from app.redistill.plots import pca_2d, trajectory_svg, velocity_svg
from app.redistill.renderer import Scene
from app.redistill.retrieval import load_db, save_db
from app.redistill.synthetic import build_suite_db

from .basic import LocalTestCase, fixture_path


def fake_row(prompt, seed, particle, value=0.5):
  return OrderedDict([
    ('prompt', prompt), ('seed', seed), ('particle', particle),
    ('adjacent_inconsistency', value), ('alignment_score', 0.1), ('kl_estimate', 2.0),
    ('debias_rate', 0.25), ('mode_label', 'front@0'), ('flagged', False),
  ])


class TestConfig(SimpleTestCase):

  def test_errors_name_the_dotted_field(self):
    with self.assertRaises(ConfigError) as ctx:
      conf.build(DistillConfig, {'iterations': 10, 'warmup': {'tau': 20}}, 'distill')
    self.assertEqual(ctx.exception.field, 'distill.warmup.tau')
    with self.assertRaises(ConfigError) as ctx:
      conf.build(DistillConfig, {'adapt': {'stepz': 3}}, 'distill')
    self.assertEqual(ctx.exception.field, 'distill.adapt.stepz')
    with self.assertRaises(ConfigError) as ctx:
      conf.build(DistillConfig, {'warmup': 5}, 'distill')
    self.assertEqual(ctx.exception.field, 'distill.warmup')

  def test_experiment_validation(self):
    self.assertRaises(ConfigError, conf.build, conf.ExperimentConfig, {'prompts': [], 'seeds': [1]})
    self.assertRaises(ConfigError, conf.build, conf.ExperimentConfig, {'prompts': ['a'], 'seeds': ['x']})
    with self.assertRaises(ConfigError) as ctx:
      conf.build(conf.ExperimentConfig, {'prompts': ['a'], 'seeds': [1], 'presets': ['everything']})
    self.assertEqual(ctx.exception.field, 'presets')
    with self.assertRaises(ConfigError) as ctx:
      conf.build(conf.ExperimentConfig, {'prompts': ['a'], 'seeds': [1], 'target': {'bias': {'0': 0.5}}})
    self.assertEqual(ctx.exception.field, 'target.bias')
    with self.assertRaises(ConfigError) as ctx:
      conf.build(conf.ExperimentConfig, {'prompts': ['a'], 'seeds': [1], 'presets': ['variation'],
                                         'distill': {'retrieval': {'n_prime': 5, 'n': 2}}})
    self.assertEqual(ctx.exception.field, 'presets')

  def test_adapt_section_reaches_distill(self):
    config = conf.build(conf.ExperimentConfig, {'prompts': ['a'], 'seeds': [1], 'adapt': {'steps': 7}})
    self.assertEqual(config.distill.adapt.steps, 7)

  def test_apply_variant(self):
    base = DistillConfig(iterations=100)
    baseline = conf.apply_variant(base, conf.VARIANTS['baseline'])
    self.assertEqual(baseline.warmup.tau, 0)
    self.assertEqual(baseline.adapt.steps, 0)
    self.assertEqual(baseline.delta_denoise_weight, 0.0)
    self.assertEqual(base.warmup.tau, 15)
    self.assertEqual(base.adapt.steps, 2000)
    self.assertRaises(ConfigError, conf.apply_variant, base, {'warmup.tau': 500})

  def test_load_experiment_config(self):
    config = conf.load_experiment_config(fixture_path('experiment.json'))
    self.assertEqual(config.prompts, ['brass lamp'])
    self.assertEqual(config.distill.warmup.tau, 6)
    self.assertEqual(config.distill.retrieval.n, 2)
    self.assertEqual(config.distill.adapt.steps, 5)
    self.assertEqual(config.render.resolution, 16)
    self.assertRaises(ConfigError, conf.load_experiment_config, fixture_path('missing.json'))
    with tempfile.TemporaryDirectory() as tmp:
      path = os.path.join(tmp, 'bad.json')
      with open(path, 'w') as f:
        f.write('{"prompts": [')
      self.assertRaises(ConfigError, conf.load_experiment_config, path)

  @override_settings(REDISTILL_SEED='5')
  def test_seed_override(self):
    self.assertEqual(conf.seed_override(), 5)
    with self.settings(REDISTILL_SEED='five'):
      self.assertRaises(ConfigError, conf.seed_override)
    with self.settings(REDISTILL_SEED=None):
      self.assertIsNone(conf.seed_override())

  def test_target_radians_are_ordered(self):
    target = conf.TargetConfig(bias={'180': 0.1, '0': 0.7, '90': 0.2})
    self.assertEqual([round(k, 6) for k in target.radians()], [0.0, 1.570796, 3.141593])


class TestReport(SimpleTestCase):

  def test_rows_are_sorted_and_written(self):
    report = MetricsReport([fake_row('b', 1, 0), fake_row('a', 2, 1), fake_row('a', 2, 0),
                            fake_row('a', 1, 0, float('nan'))])
    self.assertEqual([(r['prompt'], r['seed'], r['particle']) for r in report],
                     [('a', 1, 0), ('a', 2, 0), ('a', 2, 1), ('b', 1, 0)])
    rows = list(csv.reader(io.StringIO(report.to_csv())))
    self.assertEqual(rows[0], ['prompt', 'seed', 'particle', 'adjacent_inconsistency', 'alignment_score',
                               'kl_estimate', 'debias_rate', 'mode_label', 'flagged'])
    self.assertEqual(rows[2], ['a', '2', '0', '0.5', '0.1', '2.0', '0.25', 'front@0', '0'])
    self.assertEqual(summarize(report)['adjacent_inconsistency'], 0.5)
    self.assertEqual(summarize(report)['debias_rate'], 0.25)

  def test_slugify(self):
    self.assertEqual(slugify('Brass  Lamp!'), 'brass-lamp')
    self.assertEqual(slugify('???'), 'prompt')


class TestRunExperiment(LocalTestCase):

  def test_fans_out_one_job_per_variant_prompt_and_seed(self):
    config = conf.build(conf.ExperimentConfig, {
      'prompts': ['brass lamp', 'toy robot'], 'seeds': [1, 2], 'presets': ['ablation'],
      'db': fixture_path('experiment.json'),
    })
    jobs = build_jobs(config, 'out', '/tmp/db.jsonl', [1, 2])
    self.assertEqual(len(jobs), 3 * 2 * 2)
    no_warmup = [job for job in jobs if job['variant'] == 'no_warmup']
    self.assertTrue(all(job['distill']['warmup']['tau'] == 0 for job in no_warmup))
    self.assertEqual(jobs[0]['run_dir'], os.path.join('out', 'runs', 'full', 'brass-lamp', 'seed-1'))

    def fake_job(job):
      return {'rows': [fake_row(job['prompt'], job['seed'], 0)], 'artifacts': []}
    with tempfile.TemporaryDirectory() as tmp:
      with patch('app.redistill.experiment.execute_job', side_effect=fake_job) as execute:
        result = run_experiment(config, tmp)
      self.assertEqual(execute.call_count, 12)
      self.assertEqual(list(result.reports), ['full', 'no_warmup', 'no_adapter'])
      for name in ('no_warmup', 'no_adapter'):
        self.assertTrue(os.path.exists(os.path.join(tmp, 'ablation', name, 'report.csv')))
    self.assertEqual(len(result.report), 4)

  def test_variation_and_prefix_presets(self):
    config = conf.build(conf.ExperimentConfig, {
      'prompts': ['brass lamp'], 'seeds': [1], 'presets': ['variation', 'prefixes'],
      'distill': {'retrieval': {'n_prime': 5, 'n': 3}}, 'db': fixture_path('experiment.json'),
    })
    jobs = build_jobs(config, 'out', '/tmp/db.jsonl', [1])
    self.assertEqual([job['variant'] for job in jobs],
                     ['full', 'asset_rank_0', 'asset_rank_1', 'asset_rank_2', 'learned_prefixes',
                      'frozen_prefixes'])
    ranks = dict((job['variant'], job['distill']['asset_rank']) for job in jobs)
    self.assertEqual(ranks, {'full': None, 'asset_rank_0': 0, 'asset_rank_1': 1, 'asset_rank_2': 2,
                             'learned_prefixes': None, 'frozen_prefixes': None})
    learned = dict((job['variant'], job['distill']['adapt']['learn_prefixes']) for job in jobs)
    self.assertTrue(learned['learned_prefixes'])
    self.assertFalse(learned['frozen_prefixes'])

    def fake_job(job):
      return {'rows': [fake_row(job['prompt'], job['seed'], 0)], 'artifacts': []}
    with tempfile.TemporaryDirectory() as tmp:
      with patch('app.redistill.experiment.execute_job', side_effect=fake_job):
        result = run_experiment(config, tmp)
      for preset, name in (('variation', 'asset_rank_2'), ('prefixes', 'frozen_prefixes')):
        with open(os.path.join(tmp, preset, name, 'report.csv')) as f:
          self.assertIn('debias_rate', f.readline())
    self.assertEqual(summarize(result.reports['frozen_prefixes'])['debias_rate'], 0.25)

  def test_built_database_uses_the_configured_pose_grid(self):
    config = conf.build(conf.ExperimentConfig, {'prompts': ['brass lamp'], 'seeds': [1]})

    def fake_job(job):
      return {'rows': [fake_row(job['prompt'], job['seed'], 0)], 'artifacts': []}
    with tempfile.TemporaryDirectory() as tmp:
      with self.settings(REDISTILL_DB_POSE_GRID=6):
        with patch('app.redistill.experiment.execute_job', side_effect=fake_job):
          run_experiment(config, tmp)
      index = load_db(os.path.join(tmp, 'db.jsonl'), db_poses=6)
    self.assertEqual(len(index.pose_azimuths), 6)

  def test_missing_database(self):
    config = conf.build(conf.ExperimentConfig, {'prompts': ['a'], 'seeds': [1], 'db': '/nonexistent.jsonl'})
    with tempfile.TemporaryDirectory() as tmp:
      self.assertRaises(ConfigError, run_experiment, config, tmp)

  def test_small_experiment(self):
    with tempfile.TemporaryDirectory() as tmp:
      with self.settings(REDISTILL_SEED=None):
        result = run_experiment(fixture_path('experiment.json'), tmp)
      report = result.report
      self.assertEqual(len(report), 2)
      self.assertEqual(report.column('seed'), [3, 3])
      self.assertEqual(report.flagged(), [])
      rates = report.column('debias_rate')
      self.assertEqual(rates[0], rates[1])
      self.assertTrue(0.0 <= rates[0] <= 1.0)
      run_dir = os.path.join(tmp, 'runs', 'full', 'brass-lamp', 'seed-3')
      for name in ('runlog.csv', 'particle-0.json', 'particle-1.json', 'trajectory.svg', 'velocity.svg'):
        self.assertIn(os.path.join(run_dir, name), result.artifacts)
      particle = Scene.load(os.path.join(run_dir, 'particle-1.json'))
      self.assertEqual(particle.n_points, 8)
      with open(os.path.join(run_dir, 'runlog.csv')) as f:
        self.assertEqual(len(f.read().splitlines()), 1 + 12 * 2)
      self.assertTrue(os.path.exists(os.path.join(tmp, 'report.csv')))
      self.assertTrue(os.path.exists(os.path.join(tmp, 'db.jsonl')))

  def test_seed_override_replaces_the_seed_list(self):
    with tempfile.TemporaryDirectory() as tmp:
      with self.settings(REDISTILL_SEED='9'):
        result = run_experiment(fixture_path('experiment.json'), tmp)
    self.assertEqual(result.report.column('seed'), [9, 9])


class TestPlots(SimpleTestCase):

  def test_pca_of_degenerate_points(self):
    self.assertEqual(pca_2d([[1.0, 2.0]]).shape, (1, 2))
    self.assertFalse(pca_2d([[1.0, 2.0], [1.0, 2.0]]).any())

  def test_documents(self):
    doc = trajectory_svg([[[0.0, 1.0, 2.0], [1.0, 1.0, 0.0]], [[2.0, 0.0, 1.0]]])
    self.assertTrue(doc.startswith('<svg'))
    self.assertEqual(doc.count('<polyline'), 2)
    doc = velocity_svg({'v2d particle 0': [(1, 0.5), (2, 0.25)], 'vasset particle 0': [(1, 3.0), (2, 0.0)]})
    self.assertEqual(doc.count('<polyline'), 2)
    self.assertIn('vasset particle 0', doc)
    self.assertNotIn('<polyline', velocity_svg({}))


class TestCommands(SimpleTestCase):

  @classmethod
  def setUpClass(cls):
    super(TestCommands, cls).setUpClass()
    cls.tmp = tempfile.TemporaryDirectory()
    cls.db = os.path.join(cls.tmp.name, 'db.jsonl')
    save_db(build_suite_db(variants=1, distractors=3), cls.db)

  @classmethod
  def tearDownClass(cls):
    cls.tmp.cleanup()
    super(TestCommands, cls).tearDownClass()

  def test_retrieve(self):
    out = os.path.join(self.tmp.name, 'retrieved.json')
    stdout = io.StringIO()
    call_command('retrieve', db=self.db, prompt='brass lamp', n=2, n_prime=4, out=out, stdout=stdout)
    with open(out) as f:
      payload = json.load(f)
    self.assertEqual(len(payload['assets']), 2)
    self.assertEqual(len(payload['pool']), 4)
    self.assertFalse(payload['short'])
    for asset in payload['assets']:
      self.assertIn(asset['uid'], payload['pool'])
      self.assertIn(asset['uid'], stdout.getvalue())

  def test_adapt(self):
    out = os.path.join(self.tmp.name, 'adapter.json')
    call_command('adapt', db=self.db, prompt='brass lamp', out=out, steps=3, stdout=io.StringIO())
    adapter, prefixes = load_checkpoint(out)
    self.assertEqual(adapter.render_dim, 256)
    self.assertLessEqual(adapter.stopped_step, 3)

  def test_distill_with_a_hand_picked_asset(self):
    out = os.path.join(self.tmp.name, 'distilled')
    call_command('distill', db=self.db, prompt='brass lamp', out=out, iterations=3, particles=1,
                 adapt_steps=0, assets=['lamp-0'], stdout=io.StringIO())
    self.assertTrue(os.path.exists(os.path.join(out, 'particle-0.json')))
    with open(os.path.join(out, 'runlog.csv')) as f:
      self.assertEqual(len(f.read().splitlines()), 4)
    self.assertRaises(CommandError, call_command, 'distill', db=self.db, prompt='brass lamp', out=out,
                      iterations=3, particles=1, adapt_steps=0, assets=['nope-0'], stdout=io.StringIO())

  def test_errors_become_command_errors(self):
    self.assertRaises(CommandError, call_command, 'eval', fixture_path('missing.json'), stdout=io.StringIO())
    self.assertRaises(CommandError, call_command, 'retrieve', db=fixture_path('experiment.json'),
                      prompt='lamp', stdout=io.StringIO())

  def test_eval(self):
    out = os.path.join(self.tmp.name, 'eval')
    stdout = io.StringIO()
    with self.settings(REDISTILL_SEED=None):
      call_command('eval', fixture_path('experiment.json'), out=out, stdout=stdout)
    self.assertIn('full: 2 rows', stdout.getvalue())
    self.assertTrue(os.path.exists(os.path.join(out, 'report.csv')))

  def test_demo_is_reproducible(self):
    outputs = []
    for name in ('first', 'second'):
      out = os.path.join(self.tmp.name, 'demo-%s' % name)
      with self.settings(REDISTILL_SEED=None):
        call_command('demo', out=out, seed=4, stdout=io.StringIO())
      with open(os.path.join(out, 'report.csv'), 'rb') as f:
        report = f.read()
      with open(os.path.join(out, 'runs', 'full', 'brass-lamp', 'seed-4', 'runlog.csv'), 'rb') as f:
        runlog = f.read()
      outputs.append((report, runlog))
    self.assertEqual(outputs[0], outputs[1])
    self.assertEqual(len(outputs[0][0].splitlines()), 1 + 2 * 2)
