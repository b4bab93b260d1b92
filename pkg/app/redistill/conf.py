"""
Typed configuration objects from Django settings and JSON documents.
"""
import dataclasses
import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field

from django.conf import settings

from .adapter import AdaptConfig
from .engine import DistillConfig, WarmupConfig
from .errors import ConfigError
from .renderer import RenderConfig
from .retrieval import INDEX_MODES, RetrievalConfig

# preset name -> variants run alongside the main configuration
PRESETS = OrderedDict([
  ('ablation', ('full', 'no_warmup', 'no_adapter')),
  ('particles', ('particles_1', 'particles_2', 'particles_4')),
  ('baseline', ('full', 'baseline')),
  ('variation', ('full', 'asset_rank_0', 'asset_rank_1', 'asset_rank_2')),
  ('prefixes', ('learned_prefixes', 'frozen_prefixes')),
])

# variant name -> DistillConfig overrides, nested fields dotted
VARIANTS = OrderedDict([
  ('full', {}),
  ('baseline', {'warmup.tau': 0, 'adapt.steps': 0, 'delta_denoise_weight': 0.0}),
  ('no_warmup', {'warmup.tau': 0}),
  ('no_adapter', {'adapt.steps': 0}),
  ('particles_1', {'n_particles': 1}),
  ('particles_2', {'n_particles': 2}),
  ('particles_4', {'n_particles': 4}),
  # one retrieved asset at a time, by retrieval rank
  ('asset_rank_0', {'asset_rank': 0}),
  ('asset_rank_1', {'asset_rank': 1}),
  ('asset_rank_2', {'asset_rank': 2}),
  ('learned_prefixes', {'adapt.learn_prefixes': True}),
  ('frozen_prefixes', {'adapt.learn_prefixes': False}),
])

NESTED = {
  (DistillConfig, 'warmup'): WarmupConfig,
  (DistillConfig, 'retrieval'): RetrievalConfig,
  (DistillConfig, 'adapt'): AdaptConfig,
}


def _join(path, key):
  return '%s.%s' % (path, key) if path else key


def build(cls, data, path=''):
  """
  Builds a config dataclass from a dict, rejecting unknown keys. Any
  ConfigError names the dotted path of the offending field.
  """
  if data is None:
    data = {}
  if dataclasses.is_dataclass(data):
    return data
  if not isinstance(data, dict):
    raise ConfigError('expected an object', field=path or cls.__name__)
  known = set(f.name for f in dataclasses.fields(cls))
  kwargs = {}
  for key, value in data.items():
    where = _join(path, key)
    if key not in known:
      raise ConfigError('unknown field', field=where)
    nested = NESTED.get((cls, key))
    kwargs[key] = build(nested, value, where) if nested else value
  try:
    return cls(**kwargs)
  except ConfigError as e:
    raise ConfigError(e.reason, field=_join(path, e.field) if e.field else path or None)
  except (TypeError, ValueError) as e:
    raise ConfigError('invalid value (%s)' % e, field=path or cls.__name__)


def to_dict(config):
  return dataclasses.asdict(config)


def render_config(overrides=None):
  data = {
    'resolution': settings.REDISTILL_RESOLUTION,
    'splat_width': settings.REDISTILL_SPLAT_WIDTH,
    'extent': settings.REDISTILL_EXTENT,
    'cutoff': settings.REDISTILL_CUTOFF,
  }
  data.update(overrides or {})
  return build(RenderConfig, data, 'render')


def distill_config(overrides=None):
  data = {'n_poses': settings.REDISTILL_POSE_GRID}
  data.update(overrides or {})
  return build(DistillConfig, data, 'distill')


def seed_override():
  if settings.REDISTILL_SEED in (None, ''):
    return None
  try:
    return int(settings.REDISTILL_SEED)
  except ValueError:
    raise ConfigError('REDISTILL_SEED must be an integer, got %r' % settings.REDISTILL_SEED,
                      field='seeds')


@dataclass
class TargetConfig:
  bias: dict = None
  cov_scale: float = 0.01

  def __post_init__(self):
    if self.bias is None:
      self.bias = {'0': 0.7, '90': 0.2, '180': 0.1}
    if not self.bias:
      raise ConfigError('camera bias has no poses', field='bias')
    total = sum(float(w) for w in self.bias.values())
    if abs(total - 1.0) > 1e-9:
      raise ConfigError('camera bias weights sum to %r' % total, field='bias')
    if not self.cov_scale > 0:
      raise ConfigError('covariance scale must be positive', field='cov_scale')

  def radians(self):
    """
    The bias keyed by azimuth in radians, in ascending order of degrees.
    """
    items = sorted((float(deg), float(w)) for deg, w in self.bias.items())
    return OrderedDict((math.radians(deg), w) for deg, w in items)


@dataclass
class ExperimentConfig:
  prompts: list
  seeds: list
  distill: DistillConfig = field(default_factory=DistillConfig)
  adapt: AdaptConfig = None
  render: RenderConfig = field(default_factory=RenderConfig)
  target: TargetConfig = field(default_factory=TargetConfig)
  metric_poses: int = 24
  output_dir: str = 'output'
  db: str = None
  db_mode: str = 'exact'
  presets: list = field(default_factory=list)

  def __post_init__(self):
    if not self.prompts or not all(isinstance(p, str) and p.strip() for p in self.prompts):
      raise ConfigError('need a non-empty list of prompts', field='prompts')
    if not self.seeds or not all(isinstance(s, int) for s in self.seeds):
      raise ConfigError('need a non-empty list of integer seeds', field='seeds')
    if self.metric_poses < 8:
      raise ConfigError('metric grid needs at least 8 poses', field='metric_poses')
    if self.db_mode not in INDEX_MODES:
      raise ConfigError('unknown index mode %r' % self.db_mode, field='db_mode')
    unknown = [p for p in self.presets if p not in PRESETS]
    if unknown:
      raise ConfigError('unknown presets %s' % unknown, field='presets')
    if self.adapt is not None:
      self.distill = dataclasses.replace(self.distill, adapt=self.adapt)
    for preset in self.presets:
      for name in PRESETS[preset]:
        try:
          apply_variant(self.distill, VARIANTS[name])
        except ConfigError as e:
          raise ConfigError('variant %s of preset %s: %s' % (name, preset, e.reason), field='presets')


NESTED.update({
  (ExperimentConfig, 'distill'): DistillConfig,
  (ExperimentConfig, 'adapt'): AdaptConfig,
  (ExperimentConfig, 'render'): RenderConfig,
  (ExperimentConfig, 'target'): TargetConfig,
})


def load_experiment_config(path):
  try:
    with open(path) as f:
      data = json.load(f)
  except ValueError as e:
    raise ConfigError('invalid JSON (%s)' % e, field=path)
  except IOError as e:
    raise ConfigError('cannot read config (%s)' % e, field=path)
  if isinstance(data, dict):
    data.setdefault('metric_poses', settings.REDISTILL_METRIC_GRID)
    data.setdefault('output_dir', settings.REDISTILL_OUTPUT_DIR)
    render = {
      'resolution': settings.REDISTILL_RESOLUTION,
      'splat_width': settings.REDISTILL_SPLAT_WIDTH,
      'extent': settings.REDISTILL_EXTENT,
      'cutoff': settings.REDISTILL_CUTOFF,
    }
    render.update(data.get('render') or {})
    data['render'] = render
  return build(ExperimentConfig, data)


def apply_variant(config, overrides):
  """
  Copy of a DistillConfig with overrides applied; 'warmup.tau' style keys
  reach into nested configs.
  """
  top = {}
  nested = OrderedDict()
  for key, value in overrides.items():
    if '.' in key:
      name, sub = key.split('.', 1)
      nested.setdefault(name, {})[sub] = value
    else:
      top[key] = value
  for name, subs in nested.items():
    top[name] = dataclasses.replace(getattr(config, name), **subs)
  return dataclasses.replace(config, **top)
