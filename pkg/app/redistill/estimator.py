"""
Low-rank score correction for the current particle-render distribution.

eps_{phi,zeta}(x_t, t, psi) = eps_phi(x_t, t) + U (V^T x_t) + bias[t bucket, pose bucket]
"""
import logging
import math

import numpy as np

from .errors import ConfigError, NumericalError, ShapeError
from .oracle import NoiseSchedule, oracle_epsilon, schedule_coeffs

logger = logging.getLogger(__name__)

T_BUCKETS = 8


class VariationalEstimator(object):

  def __init__(self, u, v, bias, lr=0.05, factor_lr_scale=0.1, factor_clip=1.0, schedule=None):
    u = np.array(u, dtype=float)
    v = np.array(v, dtype=float)
    bias = np.array(bias, dtype=float)
    if u.ndim != 2 or u.shape != v.shape:
      raise ShapeError('factors must share a (D, r) shape, got %s and %s' % (u.shape, v.shape))
    if bias.ndim != 3 or bias.shape[2] != u.shape[0]:
      raise ShapeError('bias table must be (t buckets, pose buckets, %d)' % u.shape[0])
    if lr < 0 or factor_lr_scale < 0:
      raise ConfigError('learning rates must be non-negative', field='estimator_lr')
    if not factor_clip > 0:
      raise ConfigError('factor clip must be positive', field='factor_clip')
    self.u = u
    self.v = v
    self.bias = bias
    self.lr = float(lr)
    self.factor_lr_scale = float(factor_lr_scale)
    self.factor_clip = float(factor_clip)
    self.schedule = schedule or NoiseSchedule()

  @classmethod
  def zeros(cls, render_dim, rank=4, pose_buckets=16, **kwargs):
    return cls(np.zeros((render_dim, rank)), np.zeros((render_dim, rank)),
               np.zeros((T_BUCKETS, pose_buckets, render_dim)), **kwargs)

  @classmethod
  def initial(cls, render_dim, rng, rank=4, pose_buckets=16, init_scale=0.01, **kwargs):
    """
    U small and random, V zero: the correction starts at exactly zero but
    both factors receive gradients.
    """
    est = cls.zeros(render_dim, rank=rank, pose_buckets=pose_buckets, **kwargs)
    est.u = rng.normal(0.0, init_scale, size=(render_dim, rank))
    return est

  def copy(self):
    return VariationalEstimator(self.u.copy(), self.v.copy(), self.bias.copy(), lr=self.lr,
                                factor_lr_scale=self.factor_lr_scale, factor_clip=self.factor_clip,
                                schedule=self.schedule)

  @property
  def render_dim(self):
    return self.u.shape[0]

  @property
  def rank(self):
    return self.u.shape[1]

  @property
  def parameter_count(self):
    return self.u.size + self.v.size + self.bias.size

  def t_bucket(self, t):
    return self.schedule.bucket(t, self.bias.shape[0])

  def pose_bucket(self, pose):
    n = self.bias.shape[1]
    return int(round(pose.azimuth / (2.0 * math.pi / n))) % n

  def correction(self, x_t, t, pose):
    x_t = np.asarray(x_t, dtype=float)
    if x_t.shape != (self.render_dim,):
      raise ShapeError('x_t has shape %s, estimator dimension is %d' % (x_t.shape, self.render_dim))
    return self.u.dot(self.v.T.dot(x_t)) + self.bias[self.t_bucket(t), self.pose_bucket(pose)]

  def is_finite(self):
    return all(np.all(np.isfinite(a)) for a in (self.u, self.v, self.bias))

  def summary(self):
    return {
      'rank': self.rank,
      'parameters': self.parameter_count,
      'factor_norm': float(np.linalg.norm(self.u.dot(self.v.T))),
      'bias_norm': float(np.linalg.norm(self.bias)),
    }


def variational_epsilon(estimator, x_t, t, pose, target):
  return oracle_epsilon(x_t, t, target) + estimator.correction(x_t, t, pose)


def dsm_loss_and_grads(estimator, samples, target_builder):
  """
  Mean squared epsilon residual over (x_t, t, epsilon, pose) samples and
  its exact gradients with respect to U, V and the bias table.
  """
  n = float(len(samples))
  grad_u = np.zeros_like(estimator.u)
  grad_v = np.zeros_like(estimator.v)
  grad_bias = np.zeros_like(estimator.bias)
  loss = 0.0
  for x_t, t, eps, pose in samples:
    vx = estimator.v.T.dot(x_t)
    pred = variational_epsilon(estimator, x_t, t, pose, target_builder(pose))
    resid = pred - eps
    loss += float(resid.dot(resid)) / n
    g = 2.0 * resid / n
    grad_u += np.outer(g, vx)
    grad_v += np.outer(x_t, estimator.u.T.dot(g))
    grad_bias[estimator.t_bucket(t), estimator.pose_bucket(pose)] += g
  return loss, {'u': grad_u, 'v': grad_v, 'bias': grad_bias}


def draw_samples(renders, rng, schedule):
  samples = []
  for x, pose in renders:
    x = np.asarray(x, dtype=float)
    t = schedule.sample_t(rng)
    eps = rng.standard_normal(x.shape[0])
    alpha, sigma = schedule_coeffs(t)
    samples.append((alpha * x + sigma * eps, t, eps, pose))
  return samples


def _clipped(grad, limit):
  norm = float(np.linalg.norm(grad))
  if norm > limit:
    return grad * (limit / norm)
  return grad


def dsm_step_zeta(estimator, particle_renders, rng, target_builder):
  """
  One stochastic denoising score matching step on (render, pose) pairs.
  Returns the updated estimator and the loss before the step.

  The factor gradients scale with the squared norm of the noisy renders, so
  their step is divided by 1 + mean ||x_t||^2 and then clipped to
  factor_clip.
  """
  if not particle_renders:
    raise ConfigError('need at least one render', field='particle_renders')
  samples = draw_samples(particle_renders, rng, estimator.schedule)
  loss, grads = dsm_loss_and_grads(estimator, samples, target_builder)
  energy = float(np.mean([x_t.dot(x_t) for x_t, _, _, _ in samples]))
  factor_lr = estimator.lr * estimator.factor_lr_scale / (1.0 + energy)
  updated = estimator.copy()
  updated.u -= factor_lr * _clipped(grads['u'], estimator.factor_clip)
  updated.v -= factor_lr * _clipped(grads['v'], estimator.factor_clip)
  updated.bias -= estimator.lr * grads['bias']
  if not (math.isfinite(loss) and updated.is_finite()):
    raise NumericalError('estimator update produced non-finite values')
  return updated, loss
