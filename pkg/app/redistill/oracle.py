"""
Analytic stand-in for a 2D diffusion prior.

Targets are isotropic Gaussian mixtures in render space. Under the
variance-preserving schedule alpha = sqrt(1 - t), sigma = sqrt(t), component
k of the perturbed density at noise level t is N(alpha * mu_k,
(alpha^2 * s_k + sigma^2) I), so scores and epsilon predictions are exact.
"""
import json
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax

from .errors import ConfigError, DomainError, ShapeError
from .renderer import render_vector

logger = logging.getLogger(__name__)

WEIGHT_CONSTANT = 'constant'
WEIGHT_SIGMA_SQUARED = 'sigma_squared'
WEIGHT_MODES = (WEIGHT_CONSTANT, WEIGHT_SIGMA_SQUARED)

WEIGHT_TOLERANCE = 1e-12

SOLVER_EULER = 'euler'
SOLVER_HEUN = 'heun'
SOLVERS = (SOLVER_EULER, SOLVER_HEUN)
# noise ratios of the DDIM grid are even in ratio ** (1 / rho) down to DDIM_RATIO_MIN
DDIM_RHO = 7.0
DDIM_RATIO_MIN = 2e-3


def schedule_coeffs(t):
  t = float(t)
  if not 0.0 <= t <= 1.0:
    raise DomainError('noise level %r outside [0, 1]' % t)
  return math.sqrt(1.0 - t), math.sqrt(t)


@dataclass(frozen=True)
class NoiseSchedule:
  t_min: float = 0.02
  t_max: float = 0.98
  weight_mode: str = WEIGHT_CONSTANT

  def __post_init__(self):
    if not 0.0 < self.t_min < self.t_max < 1.0:
      raise ConfigError('need 0 < t_min < t_max < 1, got %r, %r' % (self.t_min, self.t_max),
                        field='t_min')
    if self.weight_mode not in WEIGHT_MODES:
      raise ConfigError('unknown weight mode %r' % self.weight_mode, field='weight_mode')

  def coeffs(self, t):
    return schedule_coeffs(t)

  def weight(self, t):
    if self.weight_mode == WEIGHT_SIGMA_SQUARED:
      return float(t)
    return 1.0

  def sample_t(self, rng):
    return float(rng.uniform(self.t_min, self.t_max))

  def bucket(self, t, n_buckets):
    """
    Index of the equal-width bucket of [t_min, t_max] holding t, clamped.
    """
    frac = (float(t) - self.t_min) / (self.t_max - self.t_min)
    return min(n_buckets - 1, max(0, int(math.floor(frac * n_buckets))))


class GaussianMixtureTarget(object):

  def __init__(self, means, cov_scales, weights, condition_id=None, labels=None):
    means = np.array(means, dtype=float)
    if means.ndim == 1:
      means = means[None, :]
    cov_scales = np.array(cov_scales, dtype=float).reshape(-1)
    weights = np.array(weights, dtype=float).reshape(-1)
    if means.shape[0] == 0:
      raise ConfigError('mixture has no components', field='components')
    k = means.shape[0]
    if cov_scales.shape[0] != k or weights.shape[0] != k:
      raise ShapeError('%d means, %d cov scales, %d weights' % (k, cov_scales.shape[0], weights.shape[0]))
    if np.any(cov_scales <= 0):
      raise ConfigError('covariance scales must be positive', field='cov_scale')
    if np.any(weights < 0) or abs(float(weights.sum()) - 1.0) > WEIGHT_TOLERANCE:
      raise ConfigError('weights must be a probability vector, sum is %r' % float(weights.sum()),
                        field='weight')
    if labels is None:
      labels = ['c%d' % i for i in range(k)]
    if len(labels) != k:
      raise ShapeError('%d labels for %d components' % (len(labels), k))
    self.means = means
    self.cov_scales = cov_scales
    self.weights = weights
    self.condition_id = condition_id
    self.labels = tuple(labels)

  def __len__(self):
    return self.means.shape[0]

  def __repr__(self):
    return 'GaussianMixtureTarget(%s, %d components, dim %d)' % (self.condition_id, len(self), self.dim)

  @property
  def dim(self):
    return self.means.shape[1]

  def perturbed(self, t):
    """
    Means and isotropic variances of the components at noise level t.
    """
    alpha, sigma = schedule_coeffs(t)
    return alpha * self.means, alpha * alpha * self.cov_scales + sigma * sigma

  def to_json(self):
    return {
      'condition_id': self.condition_id,
      'components': [
        {'mean': mean.tolist(), 'cov_scale': float(s), 'weight': float(w), 'label': label}
        for mean, s, w, label in zip(self.means, self.cov_scales, self.weights, self.labels)
      ],
    }

  @classmethod
  def from_json(cls, data):
    components = data.get('components') or []
    if not components:
      raise ConfigError('mixture has no components', field='components')
    return cls(
      [c['mean'] for c in components],
      [c['cov_scale'] for c in components],
      [c['weight'] for c in components],
      condition_id=data.get('condition_id'),
      labels=[c.get('label', 'c%d' % i) for i, c in enumerate(components)],
    )

  def save(self, path):
    with open(path, 'w') as f:
      json.dump(self.to_json(), f)

  @classmethod
  def load(cls, path):
    with open(path) as f:
      return cls.from_json(json.load(f))


def _check_dim(x, target, name='x_t'):
  x = np.asarray(x, dtype=float)
  if x.shape != (target.dim,):
    raise ShapeError('%s has shape %s, target dimension is %d' % (name, x.shape, target.dim))
  return x


def _component_log_terms(x_t, t, target):
  means, var = target.perturbed(t)
  diff = x_t[None, :] - means
  sq = np.einsum('kd,kd->k', diff, diff)
  with np.errstate(divide='ignore'):
    log_w = np.log(target.weights)
  log_terms = log_w - 0.5 * target.dim * np.log(2.0 * math.pi * var) - sq / (2.0 * var)
  return log_terms, diff, var


def log_density(x_t, t, target):
  x_t = _check_dim(x_t, target)
  log_terms, _, _ = _component_log_terms(x_t, t, target)
  return float(logsumexp(log_terms))


def responsibilities(x_t, t, target):
  x_t = _check_dim(x_t, target)
  log_terms, _, _ = _component_log_terms(x_t, t, target)
  return softmax(log_terms)


def oracle_score(x_t, t, target):
  """
  Exact gradient of the log perturbed mixture density at x_t.
  """
  if len(target) == 0:
    raise ConfigError('mixture has no components', field='components')
  x_t = _check_dim(x_t, target)
  log_terms, diff, var = _component_log_terms(x_t, t, target)
  resp = softmax(log_terms)
  return -np.einsum('k,kd->d', resp / var, diff)


def oracle_epsilon(x_t, t, target):
  _, sigma = schedule_coeffs(t)
  return -sigma * oracle_score(x_t, t, target)


@dataclass
class PerturbedSample:
  x_t: np.ndarray
  t: float
  epsilon: np.ndarray


def perturb(x, t, epsilon):
  x = np.asarray(x, dtype=float)
  epsilon = np.asarray(epsilon, dtype=float)
  if x.shape != epsilon.shape:
    raise ShapeError('x has shape %s but epsilon has shape %s' % (x.shape, epsilon.shape))
  alpha, sigma = schedule_coeffs(t)
  return PerturbedSample(alpha * x + sigma * epsilon, float(t), epsilon)


def noise_ratio(t):
  """
  sigma / alpha at noise level t. DDIM moves x_t / alpha linearly in this
  ratio with slope epsilon.
  """
  alpha, sigma = schedule_coeffs(t)
  if alpha == 0.0:
    raise DomainError('noise ratio is unbounded at t = 1')
  return sigma / alpha


def ratio_to_t(ratio):
  return ratio * ratio / (1.0 + ratio * ratio)


def ddim_grid(steps, t_max, rho=DDIM_RHO, ratio_min=DDIM_RATIO_MIN):
  """
  steps + 1 noise ratios from t_max down to 0. All but the last are evenly
  spaced in ratio ** (1 / rho), ending at ratio_min; the last is exactly 0.
  """
  if int(steps) != steps or steps < 1:
    raise ConfigError('steps must be a positive integer', field='steps')
  if rho < 1:
    raise ConfigError('rho must be at least 1', field='rho')
  top = noise_ratio(t_max)
  low = min(ratio_min, top)
  ramp = np.linspace(top ** (1.0 / rho), low ** (1.0 / rho), int(steps)) ** rho
  ramp[0] = top
  return np.append(ramp, 0.0)


def ddim_sample(target, steps, x_T, schedule=None, epsilon_fn=None, solver=SOLVER_HEUN,
                rho=DDIM_RHO):
  """
  Deterministic DDIM integration from t_max down to 0.

  In the scaled variable x_t / alpha the sampler follows
  d(x / alpha) = epsilon d(sigma / alpha). The euler solver is the classic
  DDIM update; heun averages the slopes at both ends of every step except
  the last one into t = 0, which stays a DDIM step.

  epsilon_fn(x_t, t) replaces the oracle prediction when given, which is
  how adapted priors are sampled.
  """
  if solver not in SOLVERS:
    raise ConfigError('unknown solver %r' % solver, field='solver')
  schedule = schedule or NoiseSchedule()
  x = _check_dim(x_T, target, name='x_T').astype(float)
  ratios = ddim_grid(steps, schedule.t_max, rho)

  def slope(scaled, ratio):
    t = ratio_to_t(ratio)
    alpha, _ = schedule_coeffs(t)
    x_t = alpha * scaled
    if epsilon_fn is None:
      return oracle_epsilon(x_t, t, target)
    return np.asarray(epsilon_fn(x_t, t), dtype=float)

  scaled = x / schedule_coeffs(ratio_to_t(ratios[0]))[0]
  for ratio, ratio_next in zip(ratios[:-1], ratios[1:]):
    d = slope(scaled, ratio)
    moved = scaled + (ratio_next - ratio) * d
    if solver == SOLVER_HEUN and ratio_next > 0.0:
      moved = scaled + (ratio_next - ratio) * 0.5 * (d + slope(moved, ratio_next))
    scaled = moved
  return scaled


def build_conditional_target(canonical_scene, camera_bias, renderer_cfg, cov_scale=0.01,
                             condition_id=None):
  """
  One component per pose, centred on the canonical render at that pose and
  weighted by the camera bias. camera_bias is a mapping or a sequence of
  (CameraPose, weight) pairs.
  """
  items = list(camera_bias.items() if hasattr(camera_bias, 'items') else camera_bias)
  if not items:
    raise ConfigError('camera bias has no poses', field='camera_bias')
  weights = np.array([w for _, w in items], dtype=float)
  if abs(float(weights.sum()) - 1.0) > 1e-9:
    raise ConfigError('camera bias weights sum to %r' % float(weights.sum()), field='camera_bias')
  if abs(float(weights.sum()) - 1.0) > WEIGHT_TOLERANCE:
    weights = weights / weights.sum()
  poses = [pose for pose, _ in items]
  means = [render_vector(canonical_scene, pose, renderer_cfg) for pose in poses]
  labels = [pose.label for pose in poses]
  return GaussianMixtureTarget(means, [cov_scale] * len(poses), weights,
                               condition_id=condition_id, labels=labels)


def constant_target_builder(target):
  """
  A target builder that ignores the pose.
  """
  def builder(pose):
    return target
  return builder
