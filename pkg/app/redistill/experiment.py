"""
Experiment orchestration: fans (variant, prompt, seed) jobs out to the
distillation task, evaluates the final particles and merges the reports.
"""
import csv
import io
import logging
import math
import os
import re
from collections import OrderedDict
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from django.conf import settings

from . import conf
from .embedding import tokenize
from .engine import DistillConfig, distill
from .errors import ConfigError
from .metrics import (adjacent_view_inconsistency, debias_rate, kl_over_poses, mode_label,
                      prompt_alignment_score)
from .plots import trajectory_svg, velocity_svg, write_svg
from .renderer import CameraPose, RenderConfig, pose_grid, render_vector
from .retrieval import RetrievalConfig, align_orientation, load_db, retrieve, save_db
from .synthetic import biased_target_builder, build_suite_db

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ('prompt', 'seed', 'particle', 'adjacent_inconsistency', 'alignment_score',
                  'kl_estimate', 'debias_rate', 'mode_label', 'flagged')
TRAJECTORY_POINTS = 50
# back-view DDIM draws per job for the debias rate
DEBIAS_DRAWS = 50


class MetricsReport(object):

  def __init__(self, rows=()):
    self.rows = sorted(rows, key=lambda r: (r['prompt'], r['seed'], r['particle']))

  def __len__(self):
    return len(self.rows)

  def __iter__(self):
    return iter(self.rows)

  def column(self, name):
    return [row[name] for row in self.rows]

  def flagged(self):
    return [row for row in self.rows if row['flagged']]

  def to_csv(self):
    out = io.StringIO()
    writer = csv.writer(out, lineterminator='\n')
    writer.writerow(REPORT_COLUMNS)
    for row in self.rows:
      writer.writerow([
        row['prompt'], row['seed'], row['particle'],
        repr(row['adjacent_inconsistency']), repr(row['alignment_score']), repr(row['kl_estimate']),
        repr(row['debias_rate']), row['mode_label'], int(row['flagged']),
      ])
    return out.getvalue()

  def save(self, path):
    with open(path, 'w', newline='', encoding='utf-8') as f:
      f.write(self.to_csv())


@dataclass
class ExperimentResult:
  reports: OrderedDict
  artifacts: list

  @property
  def report(self):
    return self.reports['full']


def slugify(text):
  return re.sub(r'[^a-z0-9]+', '-', text.lower()).strip('-') or 'prompt'


@lru_cache(maxsize=4)
def _load_index(path, mode):
  return load_db(path, mode=mode, db_poses=settings.REDISTILL_DB_POSE_GRID)


def prompt_exemplar(tokens, index, render_cfg, alignment_grid=8):
  """
  The canonical scene the prior is built around: the record whose caption
  matches the prompt best, aligned to its category front.
  """
  single = RetrievalConfig(n_prime=1, n=1, alignment_grid=alignment_grid)
  top = retrieve(tokens, index, single).records[0]
  return align_orientation(top, top.prefix_reference_embeddings, single, render_cfg).aligned


def evaluate_particle(particle, tokens, poses, target_builder, render_cfg):
  row = OrderedDict([
    ('adjacent_inconsistency', adjacent_view_inconsistency(particle, poses, render_cfg)),
    ('alignment_score', prompt_alignment_score(particle, tokens, poses, render_cfg)),
    ('kl_estimate', kl_over_poses(particle, poses, target_builder, render_cfg)),
    ('mode_label', mode_label(particle, poses, target_builder, render_cfg)),
  ])
  values = [row['adjacent_inconsistency'], row['alignment_score'], row['kl_estimate']]
  row['flagged'] = not all(math.isfinite(v) for v in values)
  return row


def execute_job(job):
  """
  One (variant, prompt, seed) run. Writes its own artifacts under
  job['run_dir'] and returns report rows plus artifact paths.
  """
  cfg = conf.build(DistillConfig, job['distill'], 'distill')
  render_cfg = conf.build(RenderConfig, job['render'], 'render')
  target_cfg = conf.build(conf.TargetConfig, job['target'], 'target')
  index = _load_index(job['db'], job['db_mode'])
  tokens = tokenize(job['prompt'])
  exemplar = prompt_exemplar(tokens, index, render_cfg, cfg.retrieval.alignment_grid)
  builder = biased_target_builder(exemplar, render_cfg, target_cfg.radians(), target_cfg.cov_scale,
                                  condition_id=job['prompt'])

  front = CameraPose(0.0)
  stride = max(1, cfg.iterations // TRAJECTORY_POINTS)
  trajectories = [[] for _ in range(cfg.n_particles)]

  def track(iteration, particles):
    if iteration % stride == 0 or iteration == cfg.iterations:
      for i, particle in enumerate(particles):
        trajectories[i].append(render_vector(particle, front, render_cfg))

  particles, log = distill(cfg, tokens, index, builder, render_cfg, callback=track)

  run_dir = job['run_dir']
  os.makedirs(run_dir, exist_ok=True)
  artifacts = []
  runlog_path = os.path.join(run_dir, 'runlog.csv')
  log.save(runlog_path)
  artifacts.append(runlog_path)
  for i, particle in enumerate(particles):
    path = os.path.join(run_dir, 'particle-%d.json' % i)
    particle.save(path)
    artifacts.append(path)
  if cfg.iterations > 0:
    path = os.path.join(run_dir, 'trajectory.svg')
    write_svg(path, trajectory_svg(trajectories))
    artifacts.append(path)
    series = OrderedDict()
    for it, particle, v2d, vasset, _, _, _ in log.rows:
      series.setdefault('v2d particle %d' % particle, []).append((it, v2d))
      series.setdefault('vasset particle %d' % particle, []).append((it, vasset))
    path = os.path.join(run_dir, 'velocity.svg')
    write_svg(path, velocity_svg(series))
    artifacts.append(path)

  rate = debias_rate(log.prior, draws=DEBIAS_DRAWS, rng=np.random.default_rng(job['seed']))
  metric_poses = pose_grid(job['metric_poses'], offset=math.pi / job['metric_poses'])
  rows = []
  for i, particle in enumerate(particles):
    row = OrderedDict([('prompt', job['prompt']), ('seed', job['seed']), ('particle', i)])
    row.update(evaluate_particle(particle, tokens, metric_poses, builder, render_cfg))
    row['debias_rate'] = rate
    if row['flagged']:
      logger.error('Non-finite metric for %s seed %d particle %d, run flagged'
                   % (job['prompt'], job['seed'], i))
    rows.append(row)
  logger.info('Finished %s / %s / seed %d' % (job['variant'], job['prompt'], job['seed']))
  return {'rows': rows, 'artifacts': artifacts}


def variants_for(presets):
  names = ['full']
  for preset in presets:
    for name in conf.PRESETS[preset]:
      if name not in names:
        names.append(name)
  return names


def build_jobs(config, output_dir, db_path, seeds):
  jobs = []
  render = conf.to_dict(config.render)
  target = conf.to_dict(config.target)
  for variant in variants_for(config.presets):
    distill_cfg = conf.apply_variant(config.distill, conf.VARIANTS[variant])
    for prompt in config.prompts:
      for seed in seeds:
        seeded = conf.apply_variant(distill_cfg, {'seed': seed})
        jobs.append({
          'variant': variant,
          'prompt': prompt,
          'seed': seed,
          'distill': conf.to_dict(seeded),
          'render': render,
          'target': target,
          'db': db_path,
          'db_mode': config.db_mode,
          'metric_poses': config.metric_poses,
          'run_dir': os.path.join(output_dir, 'runs', variant, slugify(prompt), 'seed-%d' % seed),
        })
  return jobs


def run_experiment(config, output_dir=None):
  """
  config is an ExperimentConfig or a path to its JSON file.
  """
  from .tasks import run_distillation

  if isinstance(config, str):
    config = conf.load_experiment_config(config)
  output_dir = output_dir or config.output_dir
  os.makedirs(output_dir, exist_ok=True)
  override = conf.seed_override()
  seeds = [override] if override is not None else list(config.seeds)

  db_path = config.db
  if db_path is None:
    db_path = os.path.join(output_dir, 'db.jsonl')
    db = build_suite_db(config.render, db_poses=settings.REDISTILL_DB_POSE_GRID, mode=config.db_mode)
    save_db(db, db_path)
  elif not os.path.exists(db_path):
    raise ConfigError('no such database file %s' % db_path, field='db')
  db_path = os.path.abspath(db_path)

  jobs = build_jobs(config, output_dir, db_path, seeds)
  logger.info('Running %d jobs' % len(jobs))
  pending = [run_distillation.delay(job) for job in jobs]
  rows = OrderedDict((name, []) for name in variants_for(config.presets))
  artifacts = []
  for job, result in zip(jobs, pending):
    outcome = result.get()
    rows[job['variant']].extend(outcome['rows'])
    artifacts.extend(outcome['artifacts'])
  reports = OrderedDict((name, MetricsReport(r)) for name, r in rows.items())

  path = os.path.join(output_dir, 'report.csv')
  reports['full'].save(path)
  artifacts.append(path)
  for preset in config.presets:
    for name in conf.PRESETS[preset]:
      preset_dir = os.path.join(output_dir, preset, name)
      os.makedirs(preset_dir, exist_ok=True)
      path = os.path.join(preset_dir, 'report.csv')
      reports[name].save(path)
      artifacts.append(path)
  flagged = sum(len(r.flagged()) for r in reports.values())
  if flagged:
    logger.error('%d report rows flagged as non-finite' % flagged)
  return ExperimentResult(reports, artifacts)


def summarize(report):
  """
  Medians of the numeric report columns.
  """
  summary = OrderedDict()
  for name in ('adjacent_inconsistency', 'alignment_score', 'kl_estimate', 'debias_rate'):
    values = [v for v in report.column(name) if math.isfinite(v)]
    summary[name] = float(np.median(values)) if values else float('nan')
  return summary
