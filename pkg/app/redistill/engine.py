"""
Particle-based score distillation with retrieved-asset warm-up.

Velocities here are gradients of an energy: a particle moves by
theta <- theta - lr * (v_2d + v_asset), with weights kept non-negative.
max_step, when set, clips each point's step on top of that.
"""
import csv
import dataclasses
import io
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import softmax

from .adapter import AdaptConfig, AdaptedPrior, OraclePrior, adapt
from .embedding import embed_text
from .errors import ConfigError, NumericalError, RetrievalError, ShapeError
from .estimator import VariationalEstimator, dsm_step_zeta, variational_epsilon
from .oracle import NoiseSchedule, perturb
from .renderer import (RenderConfig, Scene, SceneGradient, pose_grid, render_vector, render_vjp,
                       view_l2_grad, view_l2_loss)
from .retrieval import RetrievalConfig, align_orientation, retrieve

logger = logging.getLogger(__name__)

MODE_VSD = 'vsd'
MODE_SDS = 'sds'
ASSIGN_NEAREST = 'nearest'
ASSIGN_RANDOM = 'random'

RUNLOG_COLUMNS = ('iter', 'particle', 'v2d_norm', 'vasset_norm', 'zeta_loss', 'warmup_flag',
                  'delta_applied')


@dataclass
class WarmupConfig:
  tau: int = None
  kernel_sigma2: float = 0.05
  pose_batch: int = 4

  def __post_init__(self):
    if self.tau is not None and self.tau < 0:
      raise ConfigError('tau must be non-negative', field='tau')
    if not self.kernel_sigma2 > 0:
      raise ConfigError('kernel variance must be positive', field='kernel_sigma2')
    if self.pose_batch < 1:
      raise ConfigError('pose batch must be at least 1', field='pose_batch')


@dataclass
class DistillConfig:
  n_particles: int = 2
  iterations: int = 2000
  lr: float = 1e-3
  max_step: float = 0.05
  delta_denoise_period: int = 3
  delta_denoise_weight: float = 1.0
  mode: str = MODE_VSD
  assignment: str = ASSIGN_NEAREST
  n_points: int = 16
  n_poses: int = 16
  estimator_rank: int = 4
  asset_rank: int = None
  estimator_lr: float = 0.05
  t_min: float = 0.02
  t_max: float = 0.98
  weight_mode: str = 'constant'
  seed: int = 0
  warmup: WarmupConfig = field(default_factory=WarmupConfig)
  retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
  adapt: AdaptConfig = field(default_factory=AdaptConfig)

  def __post_init__(self):
    if self.iterations < 0:
      raise ConfigError('iterations must be non-negative', field='iterations')
    if self.warmup.tau is None:
      self.warmup = dataclasses.replace(self.warmup, tau=int(0.15 * self.iterations))
    if self.warmup.tau > self.iterations:
      raise ConfigError('tau (%d) exceeds iterations (%d)' % (self.warmup.tau, self.iterations),
                        field='warmup.tau')
    if self.delta_denoise_period < 1:
      raise ConfigError('period must be at least 1', field='delta_denoise_period')
    if self.mode not in (MODE_VSD, MODE_SDS):
      raise ConfigError('unknown mode %r' % self.mode, field='mode')
    if self.assignment not in (ASSIGN_NEAREST, ASSIGN_RANDOM):
      raise ConfigError('unknown assignment %r' % self.assignment, field='assignment')
    if self.lr < 0:
      raise ConfigError('learning rate must be non-negative', field='lr')
    if self.max_step is not None and self.max_step <= 0:
      raise ConfigError('max_step must be positive or null', field='max_step')
    if self.asset_rank is not None and not 0 <= self.asset_rank < self.retrieval.n:
      raise ConfigError('asset rank %r outside the %d retrieved assets'
                        % (self.asset_rank, self.retrieval.n), field='asset_rank')
    if self.n_points < 1 or self.n_poses < 1:
      raise ConfigError('need at least one point and one pose', field='n_points')

  @property
  def schedule(self):
    return NoiseSchedule(self.t_min, self.t_max, self.weight_mode)


@dataclass
class ParticleSet:
  particles: list
  seed: int = 0

  def __post_init__(self):
    if not self.particles:
      raise ConfigError('a particle set needs at least one particle', field='n_particles')
    shapes = set(p.positions.shape for p in self.particles)
    if len(shapes) != 1:
      raise ShapeError('particles have inconsistent shapes %s' % sorted(shapes))

  def __len__(self):
    return len(self.particles)

  def __iter__(self):
    return iter(self.particles)

  def __getitem__(self, i):
    return self.particles[i]

  @property
  def count(self):
    return len(self.particles)


@dataclass(frozen=True)
class AssignmentMap:
  assignments: tuple

  def __getitem__(self, i):
    return self.assignments[i]

  def __len__(self):
    return len(self.assignments)

  def one_hot(self, n_assets):
    pi = np.zeros((len(self.assignments), n_assets))
    pi[np.arange(len(self.assignments)), list(self.assignments)] = 1.0
    return pi


def component_generators(seed, names=('init', 'assign', 'draws', 'zeta', 'adapt')):
  seqs = np.random.SeedSequence(seed).spawn(len(names))
  return dict(zip(names, [np.random.default_rng(s) for s in seqs]))


def init_particles(cfg, rng=None):
  if cfg.n_particles < 1:
    raise ConfigError('need at least one particle', field='n_particles')
  rng = rng or component_generators(cfg.seed)['init']
  particles = []
  for i in range(cfg.n_particles):
    positions = rng.uniform(-1.0, 1.0, size=(cfg.n_points, 3))
    weights = rng.uniform(0.5, 1.0, size=cfg.n_points)
    particles.append(Scene(positions, weights, uid='particle-%d' % i))
  return ParticleSet(particles, seed=cfg.seed)


def assign_assets(particles, assets, poses, render_cfg, mode=ASSIGN_NEAREST, rng=None):
  """
  Each particle gets the asset whose renders are closest in mean squared
  distance over the poses, lowest index on ties.
  """
  assets = list(assets)
  if not assets:
    raise ConfigError('no assets to assign', field='assets')
  if mode == ASSIGN_RANDOM:
    rng = rng or np.random.default_rng(0)
    return AssignmentMap(tuple(int(rng.integers(len(assets))) for _ in particles))
  chosen = []
  for particle in particles:
    distances = [view_l2_loss(particle, asset, poses, render_cfg) for asset in assets]
    chosen.append(int(np.argmin(distances)))
  return AssignmentMap(tuple(chosen))


def v_asset(particle, assigned_asset, poses, warmup, iteration, render_cfg):
  if iteration > warmup.tau:
    return SceneGradient.zeros_like(particle)
  _, grad = view_l2_grad(particle, assigned_asset, poses, render_cfg)
  return grad * (1.0 / warmup.kernel_sigma2)


def kernel_velocity_exact(particle, all_assets, kernel_sigma2):
  """
  Gradient of -log sum_n exp(-||theta - theta_n||^2 / (2 sigma2)) over the
  flattened parameters. Only defined for assets with the particle's shape.
  """
  theta = particle.flatten()
  stacked = []
  for asset in all_assets:
    if asset.positions.shape != particle.positions.shape:
      raise ShapeError('asset %s has %d points, particle has %d'
                       % (asset.uid, asset.n_points, particle.n_points))
    stacked.append(asset.flatten())
  if not stacked:
    raise ConfigError('no assets given', field='assets')
  diffs = theta[None, :] - np.array(stacked)
  logits = -np.einsum('nd,nd->n', diffs, diffs) / (2.0 * kernel_sigma2)
  resp = softmax(logits)
  flat = resp.dot(diffs) / kernel_sigma2
  m = particle.n_points
  return SceneGradient(flat[:3 * m].reshape(m, 3), flat[3 * m:])


def prior_direction(x, pose, t, epsilon_draw, adapted_prior, estimator, w_t):
  """
  Render-space direction w(t) * (eps_prior - eps_subtracted). Without an
  estimator the drawn noise is subtracted, which is plain score distillation.
  """
  x_t = perturb(x, t, epsilon_draw).x_t
  eps_prior = adapted_prior.epsilon(x_t, t, pose)
  if estimator is None:
    eps_sub = epsilon_draw
  else:
    eps_sub = variational_epsilon(estimator, x_t, t, pose, adapted_prior.target(pose))
  return w_t * (eps_prior - eps_sub)


def v_2d(particle, pose, t, epsilon_draw, adapted_prior, estimator, w_t, render_cfg):
  x = render_vector(particle, pose, render_cfg)
  direction = prior_direction(x, pose, t, epsilon_draw, adapted_prior, estimator, w_t)
  return render_vjp(particle, pose, render_cfg, direction)


def delta_denoise_adjust(current, at_asset, weight=1.0):
  """
  current - weight * at_asset, for scene gradients or render-space
  directions alike.
  """
  if current.shape != at_asset.shape:
    raise ShapeError('cannot adjust %s by %s' % (current.shape, at_asset.shape))
  return current - at_asset * weight


def asset_velocity_component(particle, pose, t, eps, adapted_prior, unadapted_prior, estimator, w_t,
                             render_cfg):
  adapted = v_2d(particle, pose, t, eps, adapted_prior, estimator, w_t, render_cfg)
  unadapted = v_2d(particle, pose, t, eps, unadapted_prior, estimator, w_t, render_cfg)
  return adapted - unadapted


def take_step(particle, velocity, lr, max_step=None):
  """
  theta - lr * velocity, weights projected to >= 0. With max_step each
  point's position step is scaled down to norm max_step and each weight
  step clipped to it, which is no longer plain fixed-step descent.
  """
  step_pos = lr * velocity.positions
  step_w = lr * velocity.weights
  if max_step is not None:
    norms = np.linalg.norm(step_pos, axis=1)
    step_pos = step_pos * np.minimum(1.0, max_step / np.maximum(norms, 1e-300))[:, None]
    step_w = np.clip(step_w, -max_step, max_step)
  return Scene(particle.positions - step_pos, np.maximum(0.0, particle.weights - step_w), uid=particle.uid)


class RunLog(object):

  def __init__(self):
    self.rows = []
    self.meta = {}
    self.prior = None

  def __len__(self):
    return len(self.rows)

  def add(self, iteration, particle, v2d_norm, vasset_norm, zeta_loss, warmup_flag, delta_applied):
    self.rows.append((iteration, particle, v2d_norm, vasset_norm, zeta_loss, int(warmup_flag),
                      int(delta_applied)))

  def set_zeta_loss(self, iteration, loss):
    i = len(self.rows) - 1
    while i >= 0 and self.rows[i][0] == iteration:
      row = self.rows[i]
      self.rows[i] = row[:4] + (loss,) + row[5:]
      i -= 1

  def column(self, name):
    i = RUNLOG_COLUMNS.index(name)
    return [row[i] for row in self.rows]

  def warmup_iterations(self):
    return sorted(set(row[0] for row in self.rows if row[3] > 0))

  def to_csv(self):
    out = io.StringIO()
    writer = csv.writer(out, lineterminator='\n')
    writer.writerow(RUNLOG_COLUMNS)
    for row in self.rows:
      writer.writerow([row[0], row[1], repr(row[2]), repr(row[3]), repr(row[4]), row[5], row[6]])
    return out.getvalue()

  def save(self, path):
    with open(path, 'w', newline='') as f:
      f.write(self.to_csv())


def _resolve_assets(config, prompt_tokens, db, asset_uids):
  if asset_uids:
    return [db.get(uid) for uid in asset_uids]
  if not len(db):
    raise RetrievalError('cannot distill against an empty database')
  records = retrieve(prompt_tokens, db, config.retrieval).records
  if config.asset_rank is None:
    return records
  if config.asset_rank >= len(records):
    raise RetrievalError('asked for retrieved asset %d but only %d came back'
                         % (config.asset_rank, len(records)))
  return [records[config.asset_rank]]


def distill(config, prompt_tokens, db, target_builder, render_cfg=None, asset_uids=None, callback=None,
            particles=None):
  """
  Runs retrieval, alignment, assignment and prior adaptation, then the
  particle loop. callback(iteration, particle_set) is called after every
  iteration.
  """
  render_cfg = render_cfg or RenderConfig()
  gens = component_generators(config.seed)
  schedule = config.schedule
  prompt_embedding = embed_text(prompt_tokens)

  records = _resolve_assets(config, prompt_tokens, db, asset_uids)
  aligned = []
  statuses = []
  for record in records:
    scene, rotation, status = align_orientation(record, record.prefix_reference_embeddings,
                                                config.retrieval, render_cfg)
    aligned.append(record.with_scene(scene))
    statuses.append(status)
  assets = [r.scene for r in aligned]

  poses = pose_grid(config.n_poses)
  particle_set = particles if particles is not None else init_particles(config, gens['init'])
  assignment = assign_assets(particle_set, assets, poses, render_cfg, config.assignment, gens['assign'])

  adapt_cfg = dataclasses.replace(config.adapt, seed=int(gens['adapt'].integers(2 ** 31)))
  if adapt_cfg.steps > 0:
    adapter, prefixes, curve = adapt(aligned, target_builder, adapt_cfg, render_cfg, schedule)
    prior = AdaptedPrior(target_builder, adapter, prefixes, prompt_embedding)
  else:
    adapter, curve = None, []
    prior = OraclePrior(target_builder)

  estimator = None
  if config.mode == MODE_VSD:
    estimator = VariationalEstimator.initial(render_cfg.render_dim, gens['zeta'],
                                             rank=config.estimator_rank, pose_buckets=config.n_poses,
                                             lr=config.estimator_lr, schedule=schedule)

  log = RunLog()
  log.prior = prior
  log.meta = {
    'assets': [r.uid for r in aligned],
    'alignment': statuses,
    'assignment': list(assignment.assignments),
    'adapter_stopped_step': adapter.stopped_step if adapter is not None else None,
    'adapt_curve': curve,
  }
  logger.info('Distilling %s with assets %s, assignment %s'
              % (' '.join(prompt_tokens), log.meta['assets'], log.meta['assignment']))

  draws_rng = gens['draws']
  current = list(particle_set.particles)
  d = render_cfg.render_dim
  tau = config.warmup.tau
  for s in range(1, config.iterations + 1):
    draws = []
    for _ in current:
      t = schedule.sample_t(draws_rng)
      eps = draws_rng.standard_normal(d)
      pose = poses[int(draws_rng.integers(len(poses)))]
      batch = [poses[int(j)] for j in draws_rng.integers(len(poses), size=config.warmup.pose_batch)]
      draws.append((t, eps, pose, batch))
    delta_applied = s % config.delta_denoise_period == 0 and config.delta_denoise_weight != 0
    updated = []
    for i, (particle, (t, eps, pose, batch)) in enumerate(zip(current, draws)):
      asset = assets[assignment[i]]
      w_t = schedule.weight(t)
      direction = prior_direction(render_vector(particle, pose, render_cfg), pose, t, eps, prior,
                                  estimator, w_t)
      if delta_applied:
        at_asset = prior_direction(render_vector(asset, pose, render_cfg), pose, t, eps, prior,
                                   estimator, w_t)
        direction = delta_denoise_adjust(direction, at_asset, config.delta_denoise_weight)
      v2 = render_vjp(particle, pose, render_cfg, direction)
      va = v_asset(particle, asset, batch, config.warmup, s, render_cfg)
      total = v2 + va
      if not total.is_finite():
        raise NumericalError('non-finite velocity for particle %d' % i, iteration=s)
      updated.append(take_step(particle, total, config.lr, config.max_step))
      log.add(s, i, v2.norm(), va.norm(), 0.0, s <= tau, delta_applied)
    current = updated
    if estimator is not None:
      renders = [(render_vector(p, draw[2], render_cfg), draw[2]) for p, draw in zip(current, draws)]
      estimator, zeta_loss = dsm_step_zeta(estimator, renders, gens['zeta'], prior.target)
      log.set_zeta_loss(s, zeta_loss)
    if s == tau:
      logger.info('Warm-up finished after %d iterations' % s)
    if callback is not None:
      callback(s, ParticleSet(current, seed=config.seed))

  if estimator is not None:
    log.meta['estimator'] = estimator.summary()
  return ParticleSet(current, seed=config.seed), log
