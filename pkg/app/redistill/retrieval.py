"""
Asset database: records, the embedding index, two-stage retrieval,
orientation alignment and the JSON-lines file format.
"""
import json
import logging
import math
from collections import OrderedDict, namedtuple
from dataclasses import dataclass

import numpy as np

from .embedding import EMBEDDING_DIM, cosine, embed_image, embed_text
from .errors import ConfigError, ParseError, RetrievalError
from .renderer import CameraPose, RenderConfig, Scene, pose_grid, render, rotate_scene

logger = logging.getLogger(__name__)

DB_FORMAT = 'redistill-db'
DB_VERSION = 1

PREFIXES = ('front', 'side', 'back')
PREFIX_AZIMUTHS = OrderedDict([('front', 0.0), ('side', math.pi / 2.0), ('back', math.pi)])

MODE_EXACT = 'exact'
MODE_COARSE = 'coarse_quantized'
INDEX_MODES = (MODE_EXACT, MODE_COARSE)

STATUS_ALIGNED = 'aligned'
STATUS_SYMMETRIC = 'symmetric_skipped'

SCORE_DECIMALS = 12
UNIT_TOLERANCE = 1e-9
QUANT_LEVELS = 127

AlignmentResult = namedtuple('AlignmentResult', ['aligned', 'rotation', 'status'])


@dataclass
class RetrievalConfig:
  n_prime: int = 10
  n: int = 3
  alignment_grid: int = 8
  symmetry_spread_threshold: float = 0.02

  def __post_init__(self):
    if self.n < 1:
      raise ConfigError('n must be at least 1', field='n')
    if self.n > self.n_prime:
      raise ConfigError('n (%d) must not exceed n_prime (%d)' % (self.n, self.n_prime), field='n')
    if self.alignment_grid < 4:
      raise ConfigError('alignment grid needs at least 4 azimuths', field='alignment_grid')
    if self.symmetry_spread_threshold < 0:
      raise ConfigError('threshold must be non-negative', field='symmetry_spread_threshold')


@dataclass
class RetrievalResult:
  records: list
  short: bool = False
  pool: tuple = ()

  def __iter__(self):
    return iter(self.records)

  def __len__(self):
    return len(self.records)

  @property
  def uids(self):
    return [r.uid for r in self.records]


def _unit(vec, uid, field):
  try:
    vec = np.array(vec, dtype=float)
  except (TypeError, ValueError):
    raise ParseError('not a numeric vector', uid=uid, field=field)
  if vec.shape != (EMBEDDING_DIM,):
    raise ParseError('expected %d values, got shape %s' % (EMBEDDING_DIM, vec.shape), uid=uid, field=field)
  norm = np.linalg.norm(vec)
  if not np.isfinite(norm) or abs(norm - 1.0) > UNIT_TOLERANCE:
    raise ParseError('embedding is not unit norm (norm %r)' % float(norm), uid=uid, field=field)
  return vec


class AssetRecord(object):

  def __init__(self, uid, caption_tokens, scene, text_embedding, view_embeddings,
               prefix_reference_embeddings):
    self.uid = uid
    self.caption_tokens = tuple(caption_tokens)
    self.scene = scene
    self.text_embedding = _unit(text_embedding, uid, 'text_embedding')
    self.view_embeddings = OrderedDict(
      (float(az), _unit(vec, uid, 'view_embeddings'))
      for az, vec in view_embeddings.items())
    if not self.view_embeddings:
      raise ParseError('no view embeddings', uid=uid, field='view_embeddings')
    if set(prefix_reference_embeddings) != set(PREFIXES):
      raise ParseError('prefix references must be exactly %s' % (PREFIXES,), uid=uid,
                       field='prefix_reference_embeddings')
    self.prefix_reference_embeddings = OrderedDict(
      (name, _unit(prefix_reference_embeddings[name], uid, 'prefix_reference_embeddings'))
      for name in PREFIXES)

  def __repr__(self):
    return 'AssetRecord(%s)' % self.uid

  @property
  def pose_azimuths(self):
    return tuple(self.view_embeddings.keys())

  @property
  def view_matrix(self):
    return np.array(list(self.view_embeddings.values()))

  def with_scene(self, scene):
    return AssetRecord(self.uid, self.caption_tokens, scene, self.text_embedding,
                       self.view_embeddings, self.prefix_reference_embeddings)

  def to_json(self):
    return OrderedDict([
      ('uid', self.uid),
      ('caption_tokens', list(self.caption_tokens)),
      ('scene', self.scene.to_json()),
      ('text_embedding', self.text_embedding.tolist()),
      ('view_embeddings', [[az, vec.tolist()] for az, vec in self.view_embeddings.items()]),
      ('prefix_reference_embeddings', OrderedDict(
        (name, vec.tolist()) for name, vec in self.prefix_reference_embeddings.items())),
    ])

  @classmethod
  def from_json(cls, data):
    uid = data.get('uid')
    if not isinstance(uid, str) or not uid:
      raise ParseError('missing uid', uid=uid, field='uid')
    for field in ('caption_tokens', 'scene', 'text_embedding', 'view_embeddings',
                  'prefix_reference_embeddings'):
      if field not in data:
        raise ParseError('missing field', uid=uid, field=field)
    try:
      scene = Scene.from_json(data['scene'])
    except Exception as e:
      raise ParseError(str(e), uid=uid, field='scene')
    try:
      views = OrderedDict((float(az), vec) for az, vec in data['view_embeddings'])
    except (TypeError, ValueError):
      raise ParseError('expected [azimuth, vector] pairs', uid=uid, field='view_embeddings')
    return cls(uid, data['caption_tokens'], scene, data['text_embedding'], views,
               data['prefix_reference_embeddings'])


def prefix_references(exemplar, render_cfg):
  return OrderedDict(
    (name, embed_image(render(exemplar, CameraPose(az), render_cfg)).vector)
    for name, az in PREFIX_AZIMUTHS.items())


def build_record(uid, caption_tokens, scene, render_cfg, db_poses=8, exemplar=None):
  """
  Embeds a scene for the database. Prefix references come from the
  canonical-orientation exemplar of the asset's category, or the scene
  itself when it is stored canonically.
  """
  views = OrderedDict(
    (pose.azimuth, embed_image(render(scene, pose, render_cfg)).vector)
    for pose in pose_grid(db_poses))
  refs = prefix_references(exemplar if exemplar is not None else scene, render_cfg)
  return AssetRecord(uid, caption_tokens, scene, embed_text(caption_tokens), views, refs)


class EmbeddingIndex(object):
  """
  Read-only index over asset records.
  """

  def __init__(self, records=(), mode=MODE_EXACT):
    if mode not in INDEX_MODES:
      raise ConfigError('unknown index mode %r' % mode, field='mode')
    self._records = tuple(records)
    self.mode = mode
    uids = [r.uid for r in self._records]
    if len(set(uids)) != len(uids):
      raise ParseError('duplicate uid in index', field='uid')
    grids = set(r.pose_azimuths for r in self._records)
    if len(grids) > 1:
      raise ParseError('records use different pose grids', field='view_embeddings')
    self._uids = tuple(uids)
    self._by_uid = dict(zip(uids, self._records))
    if self._records:
      self._text = np.array([r.text_embedding for r in self._records])
      self._views = np.array([r.view_matrix for r in self._records])
    else:
      self._text = np.zeros((0, EMBEDDING_DIM))
      self._views = np.zeros((0, 0, EMBEDDING_DIM))
    self._codes = np.rint(self._text * QUANT_LEVELS).astype(np.int8)
    for arr in (self._text, self._views, self._codes):
      arr.setflags(write=False)

  def __len__(self):
    return len(self._records)

  def __iter__(self):
    return iter(self._records)

  @property
  def records(self):
    return self._records

  @property
  def uids(self):
    return self._uids

  @property
  def pose_azimuths(self):
    if not self._records:
      return ()
    return self._records[0].pose_azimuths

  def get(self, uid):
    try:
      return self._by_uid[uid]
    except KeyError:
      raise RetrievalError('no record with uid %s' % uid)

  def text_scores(self, query):
    return self._text.dot(query)

  def quantized_text_scores(self, query):
    q = np.rint(np.asarray(query) * QUANT_LEVELS).astype(np.int32)
    return self._codes.astype(np.int32).dot(q) / float(QUANT_LEVELS * QUANT_LEVELS)

  def view_scores(self, indices, query):
    return self._views[list(indices)].dot(query).mean(axis=1)


def _rank(indices, scores, uids):
  return sorted(indices, key=lambda i: (-round(float(scores[i]), SCORE_DECIMALS), uids[i]))


def retrieve(query_tokens, index, cfg):
  """
  Text-stage pool of n_prime by caption similarity, then the final n by
  mean similarity of the query to each record's view embeddings.
  """
  if not len(index):
    raise RetrievalError('cannot retrieve from an empty index')
  query = embed_text(query_tokens)
  uids = index.uids
  everything = range(len(index))
  text = index.text_scores(query)
  if index.mode == MODE_EXACT:
    pool = _rank(everything, text, uids)[:cfg.n_prime]
  else:
    approx = index.quantized_text_scores(query)
    candidates = _rank(everything, approx, uids)[:2 * cfg.n_prime]
    pool = _rank(candidates, text, uids)[:cfg.n_prime]
  view = dict(zip(pool, index.view_scores(pool, query)))
  final = _rank(pool, view, uids)[:cfg.n]
  short = len(final) < cfg.n
  if short:
    logger.warning('Asked for %d assets but the index only holds %d' % (cfg.n, len(final)))
  logger.debug('Text pool %s, kept %s' % ([uids[i] for i in pool], [uids[i] for i in final]))
  return RetrievalResult([index.records[i] for i in final], short=short,
                         pool=tuple(uids[i] for i in pool))


def alignment_scores(scene, prefix_embeddings, grid, render_cfg):
  candidates = [2.0 * math.pi * k / grid for k in range(grid)]
  scores = []
  for rotation in candidates:
    rotated = rotate_scene(scene, rotation)
    total = 0.0
    for name, az in PREFIX_AZIMUTHS.items():
      emb = embed_image(render(rotated, CameraPose(az), render_cfg)).vector
      total += cosine(emb, prefix_embeddings[name])
    scores.append(total / len(PREFIX_AZIMUTHS))
  return candidates, np.array(scores)


def align_orientation(asset, prefix_embeddings=None, cfg=None, render_cfg=None):
  """
  Rotates an asset so that its front, side and back renders best match the
  category's prefix references. Assets whose scores barely change across
  rotations are treated as radially symmetric and left alone.
  """
  cfg = cfg or RetrievalConfig()
  render_cfg = render_cfg or RenderConfig()
  if cfg.alignment_grid < 4:
    raise ConfigError('alignment grid needs at least 4 azimuths', field='alignment_grid')
  if prefix_embeddings is None:
    prefix_embeddings = asset.prefix_reference_embeddings
  candidates, scores = alignment_scores(asset.scene, prefix_embeddings, cfg.alignment_grid, render_cfg)
  spread = float(scores.max() - scores.min())
  if spread < cfg.symmetry_spread_threshold:
    logger.info('Asset %s looks radially symmetric (spread %.4f), skipping alignment'
                % (asset.uid, spread))
    return AlignmentResult(rotate_scene(asset.scene, 0.0), 0.0, STATUS_SYMMETRIC)
  best = int(np.argmax(scores))
  rotation = candidates[best]
  logger.info('Asset %s aligned by %.1f degrees (spread %.4f)'
              % (asset.uid, math.degrees(rotation), spread))
  return AlignmentResult(rotate_scene(asset.scene, rotation), rotation, STATUS_ALIGNED)


def save_db(index, path):
  with open(path, 'w') as f:
    f.write(json.dumps(OrderedDict([('format', DB_FORMAT), ('version', DB_VERSION)])) + '\n')
    for record in index.records:
      f.write(json.dumps(record.to_json()) + '\n')


def load_db(path, mode=MODE_EXACT, db_poses=None):
  """
  Reads a database file. With db_poses set, the stored view keys must be
  that pose grid.
  """
  with open(path) as f:
    lines = [line for line in f.read().splitlines() if line.strip()]
  if not lines:
    return EmbeddingIndex((), mode=mode)
  try:
    header = json.loads(lines[0])
  except ValueError:
    raise ParseError('first line is not a JSON header', field='header')
  if not isinstance(header, dict) or header.get('format') != DB_FORMAT:
    raise ParseError('not a %s file' % DB_FORMAT, field='header')
  if header.get('version') != DB_VERSION:
    raise ParseError('unsupported version %r' % header.get('version'), field='version')
  records = []
  for lineno, line in enumerate(lines[1:], start=2):
    try:
      data = json.loads(line)
    except ValueError:
      raise ParseError('line %d is not valid JSON' % lineno)
    if not isinstance(data, dict):
      raise ParseError('line %d is not a record object' % lineno)
    records.append(AssetRecord.from_json(data))
  index = EmbeddingIndex(records, mode=mode)
  if db_poses is not None and len(index):
    _check_pose_grid(index.pose_azimuths, db_poses)
  logger.info('Loaded %d asset records from %s' % (len(index), path))
  return index


def _check_pose_grid(azimuths, db_poses):
  expected = [pose.azimuth for pose in pose_grid(db_poses)]
  if len(azimuths) != len(expected) or not np.allclose(azimuths, expected, rtol=0.0, atol=1e-9):
    raise ConfigError('database views are at %d azimuths, configured grid has %d poses'
                      % (len(azimuths), db_poses), field='db_poses')
