"""
Synthetic asset database and prompt suite.

Each category has a canonical exemplar with a marked front (a heavy point
off to one side towards +z), stored rotated variants of it, and the suite
prompt is the exemplar's caption. Distractors are unrelated blobs.
"""
import logging
import math
from collections import OrderedDict

import numpy as np

from .embedding import fnv1a_64
from .oracle import GaussianMixtureTarget, build_conditional_target
from .renderer import CameraPose, RenderConfig, Scene, render_vector, rotate_scene
from .retrieval import EmbeddingIndex, build_record

logger = logging.getLogger(__name__)

CATEGORIES = OrderedDict([
  ('chair', ('wooden', 'chair')),
  ('lamp', ('brass', 'lamp')),
  ('teapot', ('porcelain', 'teapot')),
  ('boot', ('leather', 'boot')),
  ('kettle', ('iron', 'kettle')),
  ('robot', ('toy', 'robot')),
  ('sofa', ('velvet', 'sofa')),
  ('guitar', ('acoustic', 'guitar')),
  ('duck', ('rubber', 'duck')),
  ('tractor', ('red', 'tractor')),
])

VARIANT_WORDS = ('small', 'old', 'shiny', 'tall', 'worn', 'heavy', 'bright', 'plain')
DISTRACTOR_WORDS = ('cloud', 'stone', 'river', 'ember', 'fern', 'quartz', 'moss', 'dune', 'reef',
                    'glacier', 'canyon', 'meadow')

DEFAULT_BIAS = OrderedDict([(0.0, 0.7), (math.pi / 2.0, 0.2), (math.pi, 0.1)])


def suite_prompts():
  return [' '.join(words) for words in CATEGORIES.values()]


def _rng_for(name, seed=0):
  return np.random.default_rng([fnv1a_64(name.encode('utf-8')) & 0xffffffff, seed])


def exemplar_scene(rng, uid=None, n_body=10):
  """
  A compact body plus a heavy front marker off the x = 0 plane, so front,
  side and back renders all differ.
  """
  body = rng.normal(0.0, 1.0, size=(n_body, 3)) * np.array([0.3, 0.4, 0.2])
  weights = rng.uniform(0.6, 1.0, size=n_body)
  marker = np.array([[0.35, 0.25, 0.45]])
  tail = np.array([[-0.25, -0.35, -0.4]])
  positions = np.vstack([body, marker, tail])
  return Scene(positions, np.concatenate([weights, [1.6, 0.8]]), uid=uid)


def axis_scene(n=5, uid=None):
  """
  Points on the vertical axis: every azimuth renders the same image.
  """
  ys = np.linspace(-0.6, 0.6, n)
  return Scene(np.column_stack([np.zeros(n), ys, np.zeros(n)]), np.ones(n), uid=uid)


def jitter(scene, rng, scale=0.03, uid=None):
  return Scene(scene.positions + rng.normal(0.0, scale, size=scene.positions.shape),
               scene.weights.copy(), uid=uid or scene.uid)


def random_blob(rng, n=12, spread=0.6, uid=None):
  return Scene(rng.uniform(-spread, spread, size=(n, 3)), rng.uniform(0.4, 1.0, size=n), uid=uid)


def category_exemplar(category):
  return exemplar_scene(_rng_for(category), uid='%s-0' % category)


def build_suite_db(render_cfg=None, variants=4, distractors=20, db_poses=8, seed=0, mode='exact'):
  """
  Per category: the canonical exemplar and rotated, jittered variants, all
  sharing the exemplar's prefix references. Plus unrelated distractors.
  """
  render_cfg = render_cfg or RenderConfig()
  records = []
  for category, words in CATEGORIES.items():
    exemplar = category_exemplar(category)
    records.append(build_record(exemplar.uid, words, exemplar, render_cfg, db_poses, exemplar))
    rng = _rng_for(category, seed + 1)
    for v in range(1, variants + 1):
      uid = '%s-%d' % (category, v)
      rotation = float(rng.uniform(0.0, 2.0 * math.pi))
      scene = rotate_scene(jitter(exemplar, rng, uid=uid), rotation)
      caption = (VARIANT_WORDS[(v - 1) % len(VARIANT_WORDS)],) + words
      records.append(build_record(uid, caption, scene, render_cfg, db_poses, exemplar))
  rng = _rng_for('distractors', seed)
  for i in range(distractors):
    uid = 'misc-%02d' % i
    caption = tuple(str(w) for w in rng.choice(DISTRACTOR_WORDS, size=2, replace=False))
    scene = random_blob(rng, uid=uid)
    records.append(build_record(uid, caption, scene, render_cfg, db_poses))
  logger.info('Built synthetic database with %d records' % len(records))
  return EmbeddingIndex(records, mode=mode)


def biased_target_builder(exemplar, render_cfg, bias=None, cov_scale=0.01, condition_id=None):
  """
  The same view-biased mixture over canonical renders for every pose.
  """
  bias = bias if bias is not None else DEFAULT_BIAS
  camera_bias = OrderedDict((CameraPose(az), w) for az, w in bias.items())
  target = build_conditional_target(exemplar, camera_bias, render_cfg, cov_scale, condition_id)

  def builder(pose):
    return target
  return builder


def bimodal_target_builder(scene_a, scene_b, render_cfg, weights=(0.5, 0.5), cov_scale=0.01,
                           labels=('asset', 'alternate')):
  """
  Per pose, a two-component mixture centred on the renders of two scenes.
  """
  cache = {}

  def builder(pose):
    if pose.azimuth not in cache:
      means = [render_vector(scene_a, pose, render_cfg), render_vector(scene_b, pose, render_cfg)]
      cache[pose.azimuth] = GaussianMixtureTarget(means, [cov_scale, cov_scale], list(weights),
                                                  condition_id='bimodal', labels=labels)
    return cache[pose.azimuth]
  return builder
