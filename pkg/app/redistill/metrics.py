"""
Desk-scale evaluation metrics.
"""
import logging
import math

import numpy as np

from .embedding import cosine, embed_image, embed_text
from .errors import ConfigError
from .oracle import ddim_sample, log_density
from .renderer import CameraPose, render, render_vector
from .retrieval import PREFIX_AZIMUTHS

logger = logging.getLogger(__name__)


def adjacent_view_inconsistency(scene, poses, cfg):
  """
  Mean L2 distance between renders at neighbouring azimuths (the last pose
  wraps to the first), relative to the mean render norm.
  """
  if len(poses) < 2:
    raise ConfigError('need at least two poses', field='metric_poses')
  renders = [render_vector(scene, pose, cfg) for pose in poses]
  mean_norm = float(np.mean([np.linalg.norm(r) for r in renders]))
  if mean_norm == 0:
    return 0.0
  diffs = [np.linalg.norm(renders[k] - renders[(k + 1) % len(renders)]) for k in range(len(renders))]
  return float(np.mean(diffs)) / mean_norm


def prompt_alignment_score(scene, prompt_tokens, poses, cfg):
  """
  Mean cosine between each render's image embedding and the prompt's text
  embedding. Low-signal renders count as 0.
  """
  query = embed_text(prompt_tokens)
  total = 0.0
  for pose in poses:
    emb = embed_image(render(scene, pose, cfg))
    if not emb.low_signal:
      total += cosine(emb.vector, query)
  return total / len(poses)


def mixture_nll(x, target):
  return -log_density(x, 0.0, target)


def target_entropy_bound(target):
  """
  Upper bound on the mixture's differential entropy: sum of component
  entropies plus the entropy of the mixing weights.
  """
  w = target.weights
  nz = w > 0
  component = 0.5 * target.dim * np.log(2.0 * math.pi * math.e * target.cov_scales)
  return float(np.sum(w * component) - np.sum(w[nz] * np.log(w[nz])))


def kl_estimate(particle_renders, target):
  renders = [np.asarray(x, dtype=float) for x in particle_renders]
  if not renders:
    raise ConfigError('need at least one render', field='particle_renders')
  nll = float(np.mean([mixture_nll(x, target) for x in renders]))
  return nll - target_entropy_bound(target)


def kl_over_poses(scene, poses, target_builder, cfg):
  return float(np.mean([kl_estimate([render_vector(scene, pose, cfg)], target_builder(pose))
                        for pose in poses]))


def nearest_component(x, target):
  d = np.linalg.norm(target.means - np.asarray(x, dtype=float)[None, :], axis=1)
  return int(np.argmin(d))


def mode_label(scene, poses, target_builder, cfg):
  """
  Most common nearest-component label over the poses, earliest pose first
  on ties.
  """
  counts = {}
  order = []
  for pose in poses:
    target = target_builder(pose)
    label = target.labels[nearest_component(render_vector(scene, pose, cfg), target)]
    if label not in counts:
      order.append(label)
      counts[label] = 0
    counts[label] += 1
  return max(order, key=lambda label: (counts[label], -order.index(label)))


def mode_distances(scene, poses, target_builder, cfg):
  """
  Mean render distance to each component label over the poses.
  """
  totals = {}
  for pose in poses:
    target = target_builder(pose)
    x = render_vector(scene, pose, cfg)
    for label, mean in zip(target.labels, target.means):
      totals[label] = totals.get(label, 0.0) + float(np.linalg.norm(x - mean)) / len(poses)
  return totals


def debias_rate(prior, view='back', draws=50, steps=25, rng=None):
  """
  Fraction of DDIM draws from the prior, conditioned on `view`, whose nearest
  target component carries that view's label. NaN when the target has no
  component for the view.
  """
  if view not in PREFIX_AZIMUTHS:
    raise ConfigError('unknown view %r' % view, field='view')
  if draws < 1:
    raise ConfigError('need at least one draw', field='draws')
  rng = rng if rng is not None else np.random.default_rng(0)
  pose = CameraPose(PREFIX_AZIMUTHS[view])
  target = prior.target(pose)
  wanted = [k for k, label in enumerate(target.labels) if label.startswith(view + '@')]
  if not wanted:
    return float('nan')

  def epsilon_fn(x_t, t):
    return prior.epsilon(x_t, t, pose)
  hits = 0
  for _ in range(draws):
    x = ddim_sample(target, steps, rng.standard_normal(target.dim), epsilon_fn=epsilon_fn)
    if nearest_component(x, target) in wanted:
      hits += 1
  rate = hits / float(draws)
  logger.debug('debias rate for %s view: %.3f over %d draws', view, rate, draws)
  return rate
