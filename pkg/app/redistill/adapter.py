"""
Test-time adaptation of the prior on renders of retrieved assets.

eps_omega(x_t, t, cond) = eps_phi(x_t, t)
    + gain[t bucket] * gate(x_t, t) * (A (B^T x_t) + W cond)

cond is the view prefix vector for the pose's sector concatenated with a
caption embedding. gate is a fixed locality factor in [0, 1] that is 1 near
the noised anchor renders the adapter was fit on and decays away from them.
"""
import copy
import json
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .embedding import EMBEDDING_DIM, embed_text
from .errors import ConfigError, NumericalError, ShapeError
from .oracle import NoiseSchedule, oracle_epsilon, schedule_coeffs
from .renderer import RenderConfig, pose_grid, render_vector, view_sector
from .retrieval import PREFIXES

logger = logging.getLogger(__name__)

COND_DIM = 2 * EMBEDDING_DIM
T_BUCKETS = 8
PREFIX_WORDS = OrderedDict([
  ('front', ('front', 'view')),
  ('side', ('side', 'view')),
  ('back', ('back', 'view')),
])


@dataclass
class AdaptConfig:
  steps: int = 2000
  lr: float = 1e-2
  rank: int = 4
  early_stop_patience: int = 50
  holdout_fraction: float = 0.1
  batch_size: int = 16
  n_poses: int = 16
  learn_prefixes: bool = True
  locality: float = 0.01
  factor_lr_scale: float = 0.1
  holdout_draws: int = 4
  seed: int = 0

  def __post_init__(self):
    if self.steps < 0:
      raise ConfigError('steps must be non-negative', field='steps')
    if not 0.0 <= self.holdout_fraction <= 0.5:
      raise ConfigError('holdout fraction must be in [0, 0.5]', field='holdout_fraction')
    if self.lr < 0:
      raise ConfigError('learning rate must be non-negative', field='lr')
    if self.rank < 1:
      raise ConfigError('rank must be at least 1', field='rank')
    if self.batch_size < 1:
      raise ConfigError('batch size must be at least 1', field='batch_size')
    if self.early_stop_patience < 1:
      raise ConfigError('patience must be at least 1', field='early_stop_patience')
    if self.locality <= 0:
      raise ConfigError('locality must be positive', field='locality')


class ViewPrefixTokens(object):

  def __init__(self, prefixes):
    if set(prefixes) != set(PREFIXES):
      raise ConfigError('prefixes must be exactly %s' % (PREFIXES,), field='prefixes')
    self.prefixes = OrderedDict()
    for name in PREFIXES:
      vec = np.array(prefixes[name], dtype=float)
      if vec.shape != (EMBEDDING_DIM,) or not np.all(np.isfinite(vec)):
        raise ConfigError('prefix %s must be a finite %d-vector' % (name, EMBEDDING_DIM),
                          field='prefixes.%s' % name)
      self.prefixes[name] = vec

  def __getitem__(self, name):
    return self.prefixes[name]

  def condition(self, name, prompt_embedding):
    return np.concatenate([self.prefixes[name], prompt_embedding])

  def copy(self):
    return ViewPrefixTokens(OrderedDict((k, v.copy()) for k, v in self.prefixes.items()))

  def to_json(self):
    return OrderedDict((k, v.tolist()) for k, v in self.prefixes.items())


def init_prefixes():
  return ViewPrefixTokens(OrderedDict((name, embed_text(words)) for name, words in PREFIX_WORDS.items()))


class AdapterParams(object):

  def __init__(self, a, b, w, t_gains=None, anchors=None, locality=0.01, stopped_step=0,
               schedule=None):
    a = np.array(a, dtype=float)
    b = np.array(b, dtype=float)
    w = np.array(w, dtype=float)
    if a.ndim != 2 or a.shape != b.shape:
      raise ShapeError('factors must share a (D, r) shape, got %s and %s' % (a.shape, b.shape))
    if w.shape != (a.shape[0], COND_DIM):
      raise ShapeError('condition map must be (%d, %d), got %s' % (a.shape[0], COND_DIM, w.shape))
    self.a = a
    self.b = b
    self.w = w
    self.t_gains = np.ones(T_BUCKETS) if t_gains is None else np.array(t_gains, dtype=float)
    self.anchors = None if anchors is None else np.array(anchors, dtype=float).reshape(-1, a.shape[0])
    self.locality = float(locality)
    self.stopped_step = int(stopped_step)
    self.schedule = schedule or NoiseSchedule()

  @classmethod
  def zeros(cls, render_dim, rank=4, **kwargs):
    return cls(np.zeros((render_dim, rank)), np.zeros((render_dim, rank)),
               np.zeros((render_dim, COND_DIM)), **kwargs)

  @classmethod
  def initial(cls, render_dim, rng, rank=4, init_scale=0.01, **kwargs):
    params = cls.zeros(render_dim, rank=rank, **kwargs)
    params.a = rng.normal(0.0, init_scale, size=(render_dim, rank))
    return params

  def copy(self):
    return copy.deepcopy(self)

  @property
  def render_dim(self):
    return self.a.shape[0]

  @property
  def rank(self):
    return self.a.shape[1]

  def t_bucket(self, t):
    return self.schedule.bucket(t, self.t_gains.shape[0])

  def gate(self, x_t, t):
    if self.anchors is None or not len(self.anchors):
      return 1.0
    alpha, sigma = schedule_coeffs(t)
    diff = x_t[None, :] - alpha * self.anchors
    excess = np.maximum(0.0, np.einsum('nd,nd->n', diff, diff) / self.render_dim - sigma * sigma)
    return float(math.exp(-excess.min() / (2.0 * (self.locality + sigma * sigma / 4.0))))

  def raw_correction(self, x_t, cond):
    return self.a.dot(self.b.T.dot(x_t)) + self.w.dot(cond)

  def correction(self, x_t, t, cond):
    x_t = np.asarray(x_t, dtype=float)
    if x_t.shape != (self.render_dim,):
      raise ShapeError('x_t has shape %s, adapter dimension is %d' % (x_t.shape, self.render_dim))
    return self.t_gains[self.t_bucket(t)] * self.gate(x_t, t) * self.raw_correction(x_t, cond)

  def is_finite(self):
    return all(np.all(np.isfinite(arr)) for arr in (self.a, self.b, self.w, self.t_gains))

  def to_json(self, prefixes=None):
    data = OrderedDict([
      ('rank', self.rank),
      ('A', self.a.tolist()),
      ('B', self.b.tolist()),
      ('W', self.w.tolist()),
      ('t_gains', self.t_gains.tolist()),
      ('prefixes', prefixes.to_json() if prefixes is not None else None),
      ('stopped_step', self.stopped_step),
      ('anchors', None if self.anchors is None else self.anchors.tolist()),
      ('locality', self.locality),
    ])
    return data

  @classmethod
  def from_json(cls, data):
    params = cls(data['A'], data['B'], data['W'], t_gains=data.get('t_gains'),
                 anchors=data.get('anchors'), locality=data.get('locality', 0.01),
                 stopped_step=data.get('stopped_step', 0))
    if params.rank != data.get('rank', params.rank):
      raise ConfigError('rank %r does not match factor shape' % data.get('rank'), field='rank')
    prefixes = ViewPrefixTokens(data['prefixes']) if data.get('prefixes') else init_prefixes()
    return params, prefixes


def save_checkpoint(path, adapter, prefixes):
  with open(path, 'w') as f:
    json.dump(adapter.to_json(prefixes), f)


def load_checkpoint(path):
  with open(path) as f:
    return AdapterParams.from_json(json.load(f))


def adapted_epsilon(adapter, prefixes, x_t, t, pose_prefix, prompt_embedding, target):
  base = oracle_epsilon(x_t, t, target)
  return base + adapter.correction(x_t, t, prefixes.condition(pose_prefix, prompt_embedding))


class OraclePrior(object):
  """
  The unadapted prior, pose-conditioned through the target builder.
  """

  def __init__(self, target_builder):
    self.target_builder = target_builder

  def target(self, pose):
    return self.target_builder(pose)

  def epsilon(self, x_t, t, pose):
    return oracle_epsilon(x_t, t, self.target_builder(pose))


class AdaptedPrior(OraclePrior):

  def __init__(self, target_builder, adapter, prefixes, prompt_embedding):
    super(AdaptedPrior, self).__init__(target_builder)
    self.adapter = adapter
    self.prefixes = prefixes
    self.prompt_embedding = prompt_embedding

  def epsilon(self, x_t, t, pose):
    return adapted_epsilon(self.adapter, self.prefixes, x_t, t, pose.sector, self.prompt_embedding,
                           self.target_builder(pose))


@dataclass
class AdaptSample:
  x_t: np.ndarray
  t: float
  epsilon: np.ndarray
  prefix: str
  caption_embedding: np.ndarray
  base: np.ndarray


def adaptation_loss_and_grads(adapter, prefixes, samples):
  """
  Mean squared residual of the adapted epsilon over samples, with exact
  gradients for A, B, W, the t-bucket gains and the prefix vectors.
  """
  n = float(len(samples))
  grads = {
    'a': np.zeros_like(adapter.a),
    'b': np.zeros_like(adapter.b),
    'w': np.zeros_like(adapter.w),
    't_gains': np.zeros_like(adapter.t_gains),
    'prefixes': OrderedDict((name, np.zeros(EMBEDDING_DIM)) for name in PREFIXES),
  }
  loss = 0.0
  for s in samples:
    cond = prefixes.condition(s.prefix, s.caption_embedding)
    tb = adapter.t_bucket(s.t)
    gain = adapter.t_gains[tb]
    gate = adapter.gate(s.x_t, s.t)
    bx = adapter.b.T.dot(s.x_t)
    raw = adapter.a.dot(bx) + adapter.w.dot(cond)
    resid = s.base + gain * gate * raw - s.epsilon
    loss += float(resid.dot(resid)) / n
    g = 2.0 * resid / n
    g_raw = gain * gate * g
    grads['a'] += np.outer(g_raw, bx)
    grads['b'] += np.outer(s.x_t, adapter.a.T.dot(g_raw))
    grads['w'] += np.outer(g_raw, cond)
    grads['t_gains'][tb] += gate * float(g.dot(raw))
    grads['prefixes'][s.prefix] += adapter.w[:, :EMBEDDING_DIM].T.dot(g_raw)
  return loss, grads


def adaptation_loss(adapter, prefixes, samples):
  return adaptation_loss_and_grads(adapter, prefixes, samples)[0]


def _apply(adapter, prefixes, grads, cfg):
  factor_lr = cfg.lr * cfg.factor_lr_scale
  adapter.a -= factor_lr * grads['a']
  adapter.b -= factor_lr * grads['b']
  adapter.w -= cfg.lr * grads['w']
  adapter.t_gains -= cfg.lr * grads['t_gains']
  if cfg.learn_prefixes:
    for name, g in grads['prefixes'].items():
      prefixes.prefixes[name] = prefixes.prefixes[name] - cfg.lr * g


@dataclass
class AdaptResult:
  adapter: AdapterParams
  prefixes: ViewPrefixTokens
  curve: list

  def __iter__(self):
    return iter((self.adapter, self.prefixes, self.curve))


class _Render(object):
  __slots__ = ('x', 'prefix', 'caption_embedding', 'target')

  def __init__(self, x, prefix, caption_embedding, target):
    self.x = x
    self.prefix = prefix
    self.caption_embedding = caption_embedding
    self.target = target


def _sample(render, rng, schedule):
  t = schedule.sample_t(rng)
  eps = rng.standard_normal(render.x.shape[0])
  alpha, sigma = schedule_coeffs(t)
  x_t = alpha * render.x + sigma * eps
  return AdaptSample(x_t, t, eps, render.prefix, render.caption_embedding,
                     oracle_epsilon(x_t, t, render.target))


def adapt(assets, target_builder, cfg=None, render_cfg=None, schedule=None):
  """
  Fits the adapter and view prefixes by denoising score matching on renders
  of the assets over a uniform pose grid, keeping the parameters with the
  best held-out loss. assets need .scene and .text_embedding, as
  AssetRecord has.
  """
  cfg = cfg or AdaptConfig()
  render_cfg = render_cfg or RenderConfig()
  schedule = schedule or NoiseSchedule()
  assets = list(assets)
  if not assets:
    raise ConfigError('adaptation needs at least one asset', field='assets')
  rng = np.random.default_rng(cfg.seed)
  renders = []
  for asset in assets:
    for pose in pose_grid(cfg.n_poses):
      renders.append(_Render(render_vector(asset.scene, pose, render_cfg), view_sector(pose.azimuth),
                             asset.text_embedding, target_builder(pose)))
  adapter = AdapterParams.initial(render_cfg.render_dim, rng, rank=cfg.rank,
                                  anchors=np.array([r.x for r in renders]), locality=cfg.locality,
                                  schedule=schedule)
  prefixes = init_prefixes()
  if cfg.steps == 0:
    return AdaptResult(adapter, prefixes, [])

  order = rng.permutation(len(renders))
  n_holdout = int(round(cfg.holdout_fraction * len(renders)))
  if cfg.holdout_fraction > 0 and len(renders) > 1:
    n_holdout = max(1, n_holdout)
  holdout = [renders[i] for i in order[:n_holdout]]
  train = [renders[i] for i in order[n_holdout:]] or holdout
  # fixed draws keep the held-out loss comparable across steps
  holdout_samples = [_sample(r, rng, schedule) for r in (holdout or train)
                     for _ in range(cfg.holdout_draws)]

  best_loss = adaptation_loss(adapter, prefixes, holdout_samples)
  best = (adapter.copy(), prefixes.copy(), 0)
  curve = [(0, None, best_loss)]
  waited = 0
  for step in range(1, cfg.steps + 1):
    batch = [_sample(train[i], rng, schedule)
             for i in rng.integers(0, len(train), size=cfg.batch_size)]
    train_loss, grads = adaptation_loss_and_grads(adapter, prefixes, batch)
    _apply(adapter, prefixes, grads, cfg)
    if not adapter.is_finite():
      raise NumericalError('adapter parameters became non-finite', iteration=step)
    held = adaptation_loss(adapter, prefixes, holdout_samples)
    curve.append((step, train_loss, held))
    if held < best_loss:
      best_loss = held
      best = (adapter.copy(), prefixes.copy(), step)
      waited = 0
    else:
      waited += 1
      if waited >= cfg.early_stop_patience:
        logger.info('Adaptation stopped early at step %d, best step %d (held-out %.6f)'
                    % (step, best[2], best_loss))
        break
  adapter, prefixes, best_step = best
  adapter.stopped_step = best_step
  return AdaptResult(adapter, prefixes, curve)
