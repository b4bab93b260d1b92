"""
Orthographic Gaussian point splatting of weighted 3D point sets.

Cameras orbit the vertical (y) axis. A pose with azimuth psi rotates the
scene by psi about y and drops the depth axis, so image columns follow the
rotated x coordinate and image rows follow y.
"""
import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError

TWO_PI = 2.0 * math.pi
SECTOR_HALF_WIDTH = math.pi / 4.0


def normalize_azimuth(azimuth):
  a = math.fmod(float(azimuth), TWO_PI)
  if a < 0.0:
    a += TWO_PI
  if a >= TWO_PI:
    a = 0.0
  return a + 0.0


def angular_distance(a, b):
  d = abs(normalize_azimuth(a) - normalize_azimuth(b))
  return min(d, TWO_PI - d)


def view_sector(azimuth):
  """
  Maps an azimuth to the view prefix it is described by:
  front within pi/4 of 0, back within pi/4 of pi, side otherwise.
  """
  if angular_distance(azimuth, 0.0) < SECTOR_HALF_WIDTH:
    return 'front'
  if angular_distance(azimuth, math.pi) < SECTOR_HALF_WIDTH:
    return 'back'
  return 'side'


@dataclass(frozen=True)
class CameraPose:
  azimuth: float
  elevation: float = 0.0

  def __post_init__(self):
    if self.elevation != 0.0:
      raise ConfigError('only elevation 0 is supported', field='elevation')
    object.__setattr__(self, 'azimuth', normalize_azimuth(self.azimuth))

  @property
  def degrees(self):
    return math.degrees(self.azimuth)

  @property
  def sector(self):
    return view_sector(self.azimuth)

  @property
  def label(self):
    return '%s@%d' % (self.sector, int(round(self.degrees)) % 360)


def pose_grid(count, offset=0.0):
  if count < 1:
    raise ConfigError('pose grid needs at least one pose', field='pose_grid')
  return [CameraPose(offset + TWO_PI * k / count) for k in range(count)]


@dataclass(frozen=True)
class RenderConfig:
  resolution: int = 16
  splat_width: float = 0.15
  extent: float = 1.5
  cutoff: float = 4.0

  def __post_init__(self):
    if int(self.resolution) != self.resolution or self.resolution < 4:
      raise ConfigError('resolution must be an integer >= 4', field='resolution')
    if not self.splat_width > 0:
      raise ConfigError('splat width must be positive', field='splat_width')
    if not self.extent > 0:
      raise ConfigError('extent must be positive', field='extent')
    if not self.cutoff > 0:
      raise ConfigError('cutoff must be positive', field='cutoff')

  @property
  def render_dim(self):
    return self.resolution * self.resolution

  @property
  def grid(self):
    spacing = 2.0 * self.extent / self.resolution
    return -self.extent + (np.arange(self.resolution) + 0.5) * spacing


class Scene(object):
  """
  A weighted point set: the thing particles and retrieved assets are made of.
  """

  def __init__(self, positions, weights, uid=None):
    positions = np.array(positions, dtype=float)
    weights = np.array(weights, dtype=float).reshape(-1)
    if positions.ndim != 2 or positions.shape[1] != 3:
      raise ShapeError('positions must be an (M, 3) array, got %s' % (positions.shape,))
    if positions.shape[0] < 1:
      raise ShapeError('a scene needs at least one point')
    if weights.shape[0] != positions.shape[0]:
      raise ShapeError('%d weights for %d points' % (weights.shape[0], positions.shape[0]))
    if not (np.all(np.isfinite(positions)) and np.all(np.isfinite(weights))):
      raise ShapeError('scene parameters must be finite')
    if np.any(weights < 0):
      raise ShapeError('point weights must be non-negative')
    self.positions = positions
    self.weights = weights
    self.uid = uid

  def __repr__(self):
    return 'Scene(%s, %d points)' % (self.uid, self.n_points)

  @property
  def n_points(self):
    return self.positions.shape[0]

  def copy(self, uid=None):
    return Scene(self.positions.copy(), self.weights.copy(), uid=uid or self.uid)

  def flatten(self):
    return np.concatenate([self.positions.ravel(), self.weights])

  def to_json(self):
    points = np.hstack([self.positions, self.weights[:, None]])
    return {'id': self.uid, 'points': points.tolist()}

  @classmethod
  def from_json(cls, data):
    points = np.array(data['points'], dtype=float)
    if points.ndim != 2 or points.shape[1] != 4:
      raise ShapeError('scene points must be [x, y, z, w] rows')
    return cls(points[:, :3], points[:, 3], uid=data.get('id'))

  def save(self, path):
    with open(path, 'w') as f:
      json.dump(self.to_json(), f)

  @classmethod
  def load(cls, path):
    with open(path) as f:
      return cls.from_json(json.load(f))


@dataclass
class SceneGradient:
  positions: np.ndarray
  weights: np.ndarray

  @classmethod
  def zeros_like(cls, scene):
    return cls(np.zeros_like(scene.positions), np.zeros_like(scene.weights))

  def _check(self, other):
    if self.positions.shape != other.positions.shape:
      raise ShapeError('gradient shapes differ: %s vs %s' % (self.positions.shape, other.positions.shape))

  def __add__(self, other):
    self._check(other)
    return SceneGradient(self.positions + other.positions, self.weights + other.weights)

  def __sub__(self, other):
    self._check(other)
    return SceneGradient(self.positions - other.positions, self.weights - other.weights)

  def __mul__(self, scale):
    return SceneGradient(self.positions * scale, self.weights * scale)

  __rmul__ = __mul__

  def __neg__(self):
    return self * -1.0

  @property
  def shape(self):
    return self.positions.shape

  def flatten(self):
    return np.concatenate([self.positions.ravel(), self.weights])

  def norm(self):
    return float(np.linalg.norm(self.flatten()))

  def is_finite(self):
    return bool(np.all(np.isfinite(self.positions)) and np.all(np.isfinite(self.weights)))


@dataclass
class RenderImage:
  pixels: np.ndarray
  pose: CameraPose

  @property
  def vector(self):
    return self.pixels.ravel()

  def to_csv(self, path):
    with open(path, 'w', newline='') as f:
      writer = csv.writer(f)
      for row in self.pixels:
        writer.writerow([repr(float(v)) for v in row])

  def to_pgm(self, path):
    peak = float(self.pixels.max())
    levels = np.zeros(self.pixels.shape, dtype=int)
    if peak > 0:
      levels = np.rint(255.0 * self.pixels / peak).astype(int)
    rows, cols = self.pixels.shape
    with open(path, 'w') as f:
      f.write('P2\n%d %d\n255\n' % (cols, rows))
      # PGM rows run top to bottom, ours run bottom to top.
      for row in levels[::-1]:
        f.write(' '.join(str(v) for v in row) + '\n')


def _splats(scene, pose, cfg):
  c, s = math.cos(pose.azimuth), math.sin(pose.azimuth)
  pos = scene.positions
  u = c * pos[:, 0] + s * pos[:, 2]
  v = pos[:, 1]
  grid = cfg.grid
  du = grid[None, :] - u[:, None]
  dv = grid[None, :] - v[:, None]
  d2 = dv[:, :, None] ** 2 + du[:, None, :] ** 2
  h2 = cfg.splat_width ** 2
  splat = np.exp(-d2 / (2.0 * h2))
  splat[d2 > (cfg.cutoff * cfg.splat_width) ** 2] = 0.0
  return c, s, du, dv, splat


def render(scene, pose, cfg):
  _, _, _, _, splat = _splats(scene, pose, cfg)
  pixels = np.tensordot(scene.weights, splat, axes=1)
  return RenderImage(pixels, pose)


def render_vector(scene, pose, cfg):
  return render(scene, pose, cfg).vector


def render_views(scene, poses, cfg):
  return np.array([render_vector(scene, pose, cfg) for pose in poses])


def _as_grid(cotangent, cfg):
  cot = np.asarray(getattr(cotangent, 'pixels', cotangent), dtype=float)
  p = cfg.resolution
  if cot.shape == (p * p,):
    cot = cot.reshape(p, p)
  if cot.shape != (p, p):
    raise ShapeError('cotangent shape %s does not match %dx%d render' % (cot.shape, p, p))
  return cot


def render_vjp(scene, pose, cfg, cotangent):
  """
  Gradient of <render(scene, pose), cotangent> with respect to the point
  positions and weights. The truncation mask is the one render uses.
  """
  cot = _as_grid(cotangent, cfg)
  c, s, du, dv, splat = _splats(scene, pose, cfg)
  grad_w = np.einsum('mij,ij->m', splat, cot)
  weighted = splat * cot[None, :, :] * (scene.weights / cfg.splat_width ** 2)[:, None, None]
  grad_u = np.einsum('mij,mj->m', weighted, du)
  grad_v = np.einsum('mij,mi->m', weighted, dv)
  grad_pos = np.empty_like(scene.positions)
  grad_pos[:, 0] = c * grad_u
  grad_pos[:, 1] = grad_v
  grad_pos[:, 2] = s * grad_u
  return SceneGradient(grad_pos, grad_w)


def view_l2_loss(scene_a, scene_b, poses, cfg):
  if not poses:
    raise ConfigError('pose list is empty', field='poses')
  total = 0.0
  for pose in poses:
    diff = render(scene_a, pose, cfg).pixels - render(scene_b, pose, cfg).pixels
    total += float(np.sum(diff * diff))
  return total / len(poses)


def view_l2_grad(scene_a, scene_b, poses, cfg):
  """
  Mean over poses of ||g(a, psi) - g(b, psi)||^2 and its gradient in a.
  """
  if not poses:
    raise ConfigError('pose list is empty', field='poses')
  total = 0.0
  grad = SceneGradient.zeros_like(scene_a)
  for pose in poses:
    diff = render(scene_a, pose, cfg).pixels - render(scene_b, pose, cfg).pixels
    total += float(np.sum(diff * diff))
    grad = grad + render_vjp(scene_a, pose, cfg, 2.0 * diff)
  n = float(len(poses))
  return total / n, grad * (1.0 / n)


def rotate_scene(scene, delta_azimuth):
  c, s = math.cos(delta_azimuth), math.sin(delta_azimuth)
  pos = scene.positions
  rotated = np.empty_like(pos)
  rotated[:, 0] = c * pos[:, 0] + s * pos[:, 2]
  rotated[:, 1] = pos[:, 1]
  rotated[:, 2] = -s * pos[:, 0] + c * pos[:, 2]
  return Scene(rotated, scene.weights.copy(), uid=scene.uid)
