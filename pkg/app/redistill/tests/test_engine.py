import math

import numpy as np
from mock import Mock

from app.redistill.adapter import AdaptConfig, AdaptedPrior, OraclePrior
from app.redistill.engine import (DistillConfig, ParticleSet, RunLog, WarmupConfig, asset_velocity_component,
                                  assign_assets, component_generators, delta_denoise_adjust, distill,
                                  init_particles, kernel_velocity_exact, prior_direction, take_step, v_2d,
                                  v_asset)
from app.redistill.errors import ConfigError, NumericalError, RetrievalError, ShapeError
from app.redistill.estimator import VariationalEstimator, variational_epsilon
from app.redistill.oracle import (GaussianMixtureTarget, constant_target_builder, oracle_epsilon,
                                  schedule_coeffs)
from app.redistill.renderer import (CameraPose, RenderConfig, Scene, SceneGradient, pose_grid, render_vector,
                                    render_vjp, view_l2_grad)
from app.redistill.retrieval import EmbeddingIndex, RetrievalConfig, build_record, retrieve
from app.redistill.synthetic import biased_target_builder, build_suite_db, category_exemplar, jitter

from .basic import SMOOTH, LocalTestCase, central_difference, random_scene, relative_error, scene_gradient_fd


def small_config(**overrides):
  data = dict(
    n_particles=2, iterations=12, n_points=6, n_poses=4,
    warmup=WarmupConfig(tau=6, pose_batch=2),
    retrieval=RetrievalConfig(n_prime=3, n=2),
    adapt=AdaptConfig(steps=3, n_poses=4, batch_size=4),
  )
  data.update(overrides)
  return DistillConfig(**data)


class TestConfig(LocalTestCase):

  def test_defaults(self):
    cfg = DistillConfig()
    self.assertEqual(cfg.warmup.tau, 300)
    self.assertEqual(DistillConfig(iterations=100).warmup.tau, 15)
    self.assertEqual(cfg.schedule.t_min, 0.02)

  def test_tau_beyond_iterations(self):
    with self.assertRaises(ConfigError) as ctx:
      DistillConfig(iterations=10, warmup=WarmupConfig(tau=11))
    self.assertEqual(ctx.exception.field, 'warmup.tau')

  def test_validation(self):
    self.assertRaises(ConfigError, DistillConfig, mode='gan')
    self.assertRaises(ConfigError, DistillConfig, assignment='closest')
    self.assertRaises(ConfigError, DistillConfig, iterations=-1)
    self.assertRaises(ConfigError, DistillConfig, max_step=0.0)
    self.assertIsNone(DistillConfig().asset_rank)
    with self.assertRaises(ConfigError) as ctx:
      DistillConfig(asset_rank=2, retrieval=RetrievalConfig(n_prime=3, n=2))
    self.assertEqual(ctx.exception.field, 'asset_rank')
    self.assertRaises(ConfigError, DistillConfig, asset_rank=-1)
    self.assertRaises(ConfigError, DistillConfig, lr=-1.0)
    self.assertRaises(ConfigError, WarmupConfig, kernel_sigma2=0.0)
    self.assertRaises(ConfigError, WarmupConfig, pose_batch=0)


class TestParticles(LocalTestCase):

  def test_generators_are_reproducible(self):
    a = component_generators(5)
    b = component_generators(5)
    for name in ('init', 'assign', 'draws', 'zeta', 'adapt'):
      self.assertEqual(a[name].integers(1 << 30), b[name].integers(1 << 30))
    self.assertNotEqual(component_generators(5)['init'].integers(1 << 30),
                        component_generators(5)['draws'].integers(1 << 30))

  def test_init_particles(self):
    cfg = DistillConfig(n_particles=3, n_points=7)
    particles = init_particles(cfg)
    self.assertEqual(len(particles), 3)
    self.assertEqual(particles[0].positions.shape, (7, 3))
    np.testing.assert_array_equal(init_particles(cfg)[2].positions, particles[2].positions)
    self.assertRaises(ConfigError, ParticleSet, [])
    self.assertRaises(ShapeError, ParticleSet, [random_scene(self.rng, 3), random_scene(self.rng, 4)])

  def test_nearest_assignment(self):
    assets = [random_scene(self.rng), random_scene(self.rng), random_scene(self.rng)]
    particles = [assets[2].copy(), assets[0].copy()]
    assignment = assign_assets(particles, assets, pose_grid(4), self.render_cfg)
    self.assertEqual(assignment.assignments, (2, 0))
    np.testing.assert_array_equal(assignment.one_hot(3), [[0, 0, 1], [1, 0, 0]])

  def test_ties_go_to_lowest_index(self):
    asset = random_scene(self.rng)
    assignment = assign_assets([random_scene(self.rng)], [asset, asset.copy()], pose_grid(4), self.render_cfg)
    self.assertEqual(assignment[0], 0)

  def test_random_assignment(self):
    assets = [random_scene(self.rng) for _ in range(3)]
    particles = [random_scene(self.rng) for _ in range(20)]
    a = assign_assets(particles, assets, pose_grid(2), self.render_cfg, 'random', np.random.default_rng(1))
    b = assign_assets(particles, assets, pose_grid(2), self.render_cfg, 'random', np.random.default_rng(1))
    self.assertEqual(a, b)
    self.assertTrue(all(0 <= i < 3 for i in a.assignments))
    self.assertRaises(ConfigError, assign_assets, particles, [], pose_grid(2), self.render_cfg)


class TestVelocities(LocalTestCase):

  def test_asset_velocity_is_scaled_view_gradient(self):
    warmup = WarmupConfig(tau=5, kernel_sigma2=0.05)
    poses = pose_grid(3)
    for _ in range(20):
      particle = random_scene(self.rng, n=int(self.rng.integers(2, 6)))
      asset = random_scene(self.rng, n=particle.n_points)
      v = v_asset(particle, asset, poses, warmup, int(self.rng.integers(1, 6)), SMOOTH)
      _, grad = view_l2_grad(particle, asset, poses, SMOOTH)
      self.assertClose(v.flatten(), grad.flatten() / 0.05, rtol=1e-12)
      numeric = scene_gradient_fd(
        lambda s: np.mean([np.sum((render_vector(s, p, SMOOTH) - render_vector(asset, p, SMOOTH)) ** 2)
                           for p in poses]) / 0.05, particle)
      self.assertLess(relative_error(v.flatten(), numeric), 1e-5)

  def test_asset_velocity_stops_after_warmup(self):
    warmup = WarmupConfig(tau=5)
    v = v_asset(random_scene(self.rng), random_scene(self.rng), pose_grid(2), warmup, 6, self.render_cfg)
    self.assertEqual(v.norm(), 0.0)

  def test_exact_kernel_velocity(self):
    particle = random_scene(self.rng, n=3)
    assets = [random_scene(self.rng, n=3) for _ in range(4)]
    flat = np.array([a.flatten() for a in assets])

    def energy(theta):
      d = theta[None, :] - flat
      logits = -np.sum(d * d, axis=1) / (2 * 0.3)
      top = logits.max()
      return -(top + math.log(np.sum(np.exp(logits - top))))
    numeric = central_difference(energy, particle.flatten())
    analytic = kernel_velocity_exact(particle, assets, 0.3).flatten()
    self.assertLess(relative_error(analytic, numeric), 1e-6)
    self.assertRaises(ShapeError, kernel_velocity_exact, particle, [random_scene(self.rng, n=4)], 0.3)

  def test_view_velocity_tracks_exact_kernel(self):
    cfg = RenderConfig(resolution=32, cutoff=12.0)
    asset = Scene([[0.2, -0.5, 0.1], [-0.1, 0.5, -0.2]], [1.0, 1.0])
    delta = self.rng.normal(size=(2, 3))
    particle = Scene(asset.positions + 1e-3 * delta / np.linalg.norm(delta), asset.weights.copy())
    warmup = WarmupConfig(tau=10, kernel_sigma2=0.05)
    view = v_asset(particle, asset, pose_grid(8), warmup, 1, cfg).flatten()
    exact = kernel_velocity_exact(particle, [asset], 0.05).flatten()
    cos = view.dot(exact) / (np.linalg.norm(view) * np.linalg.norm(exact))
    self.assertGreaterEqual(cos, 0.9)

  def test_v2d_by_hand(self):
    cfg = RenderConfig(resolution=4, cutoff=12.0)
    particle = random_scene(self.rng, n=2, spread=0.4)
    pose = CameraPose(0.3)
    eps = self.rng.normal(size=cfg.render_dim)
    k = 6
    prior = Mock()
    prior.epsilon.side_effect = lambda x_t, t, p: eps + 0.5 * np.eye(cfg.render_dim)[k]
    v = v_2d(particle, pose, 0.4, eps, prior, None, 2.0, cfg)
    numeric = scene_gradient_fd(lambda s: render_vector(s, pose, cfg)[k], particle)
    self.assertLess(relative_error(v.flatten(), 2.0 * 0.5 * numeric), 1e-5)
    self.assertEqual(prior.epsilon.call_count, 1)

  def test_sds_subtracts_the_drawn_noise(self):
    cfg = self.render_cfg
    dim = cfg.render_dim
    for _ in range(20):
      target = GaussianMixtureTarget([self.rng.normal(size=dim), self.rng.normal(size=dim)], [0.1, 0.3],
                                     [0.4, 0.6])
      prior = OraclePrior(constant_target_builder(target))
      particle = random_scene(self.rng)
      pose = CameraPose(float(self.rng.uniform(0.0, 2 * math.pi)))
      t = float(self.rng.uniform(0.05, 0.95))
      eps = self.rng.standard_normal(dim)
      w = float(self.rng.uniform(0.5, 2.0))
      x = render_vector(particle, pose, cfg)
      alpha, sigma = schedule_coeffs(t)
      x_t = alpha * x + sigma * eps
      expected = w * (oracle_epsilon(x_t, t, target) - eps)
      self.assertClose(prior_direction(x, pose, t, eps, prior, None, w), expected, rtol=1e-12, atol=1e-12)
      zero = VariationalEstimator.zeros(dim, pose_buckets=4)
      np.testing.assert_array_equal(variational_epsilon(zero, x_t, t, pose, target),
                                    oracle_epsilon(x_t, t, target))
      v = v_2d(particle, pose, t, eps, prior, None, w, cfg)
      self.assertClose(v.flatten(), render_vjp(particle, pose, cfg, expected).flatten(), rtol=1e-9,
                       atol=1e-12)

  def test_zero_estimator_cancels_the_prior(self):
    dim = self.render_cfg.render_dim
    target = GaussianMixtureTarget([np.zeros(dim)], [0.1], [1.0])
    prior = OraclePrior(constant_target_builder(target))
    zero = VariationalEstimator.zeros(dim, pose_buckets=4)
    eps = self.rng.normal(size=dim)
    v = v_2d(random_scene(self.rng), CameraPose(0.0), 0.5, eps, prior, zero, 1.0, self.render_cfg)
    self.assertEqual(v.norm(), 0.0)

  def test_delta_denoise(self):
    a = np.array([1.0, 2.0, 3.0])
    b = np.array([0.5, 0.5, 0.5])
    np.testing.assert_array_equal(delta_denoise_adjust(a, b), [0.5, 1.5, 2.5])
    np.testing.assert_array_equal(delta_denoise_adjust(a, b, 0.0), a)
    self.assertRaises(ShapeError, delta_denoise_adjust, a, np.zeros(2))

  def test_asset_component_vanishes_for_identical_priors(self):
    dim = self.render_cfg.render_dim
    prior = OraclePrior(constant_target_builder(GaussianMixtureTarget([np.ones(dim)], [0.1], [1.0])))
    eps = self.rng.normal(size=dim)
    v = asset_velocity_component(random_scene(self.rng), CameraPose(0.0), 0.5, eps, prior, prior, None,
                                 1.0, self.render_cfg)
    self.assertEqual(v.norm(), 0.0)

  def test_take_step_clips(self):
    particle = Scene([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], [0.01, 1.0])
    velocity = SceneGradient(np.array([[100.0, 0.0, 0.0], [0.0, 0.001, 0.0]]), np.array([100.0, -0.01]))
    moved = take_step(particle, velocity, 1.0, 0.05)
    self.assertAlmostEqual(moved.positions[0, 0], -0.05)
    self.assertAlmostEqual(moved.positions[1, 1], -0.001)
    self.assertEqual(moved.weights[0], 0.0)
    self.assertAlmostEqual(moved.weights[1], 1.01)

  def test_take_step_is_plain_descent_by_default(self):
    particle = random_scene(self.rng, n=4)
    velocity = SceneGradient(50.0 * self.rng.normal(size=(4, 3)), self.rng.normal(size=4))
    moved = take_step(particle, velocity, 0.1)
    np.testing.assert_array_equal(moved.positions, particle.positions - 0.1 * velocity.positions)
    np.testing.assert_array_equal(moved.weights, np.maximum(0.0, particle.weights - 0.1 * velocity.weights))


class TestRunLog(LocalTestCase):

  def test_csv(self):
    log = RunLog()
    log.add(1, 0, 0.5, 0.25, 0.0, True, False)
    log.add(1, 1, 0.1, 0.0, 0.0, True, False)
    log.add(2, 0, 0.3, 0.0, 0.0, False, True)
    log.set_zeta_loss(1, 0.75)
    lines = log.to_csv().splitlines()
    self.assertEqual(lines[0], 'iter,particle,v2d_norm,vasset_norm,zeta_loss,warmup_flag,delta_applied')
    self.assertEqual(lines[1], '1,0,0.5,0.25,0.75,1,0')
    self.assertEqual(lines[3], '2,0,0.3,0.0,0.0,0,1')
    self.assertEqual(log.warmup_iterations(), [1])
    self.assertEqual(log.column('particle'), [0, 1, 0])


class TestDistill(LocalTestCase):

  def setUp(self):
    super(TestDistill, self).setUp()
    self.db = build_suite_db(self.render_cfg, variants=1, distractors=2)
    self.tokens = ['brass', 'lamp']
    self.builder = biased_target_builder(category_exemplar('lamp'), self.render_cfg)

  def test_reproducible(self):
    cfg = small_config(seed=4)
    a, log_a = distill(cfg, self.tokens, self.db, self.builder, self.render_cfg)
    b, log_b = distill(cfg, self.tokens, self.db, self.builder, self.render_cfg)
    for p, q in zip(a, b):
      np.testing.assert_array_equal(p.positions, q.positions)
      np.testing.assert_array_equal(p.weights, q.weights)
    self.assertEqual(log_a.to_csv(), log_b.to_csv())
    c, _ = distill(small_config(seed=5), self.tokens, self.db, self.builder, self.render_cfg)
    self.assertFalse(np.array_equal(a[0].positions, c[0].positions))

  def test_log_layout(self):
    calls = []
    particles, log = distill(small_config(), self.tokens, self.db, self.builder, self.render_cfg,
                             callback=lambda s, ps: calls.append((s, len(ps))))
    self.assertEqual(len(log), 12 * 2)
    self.assertEqual(calls, [(s, 2) for s in range(1, 13)])
    for it, _, v2d, vasset, zeta, warm, delta in log.rows:
      self.assertEqual(warm, int(it <= 6))
      self.assertEqual(vasset > 0, it <= 6)
      self.assertEqual(delta, int(it % 3 == 0))
      self.assertGreater(zeta, 0.0)
    self.assertEqual(len(log.meta['assets']), 2)
    self.assertEqual(len(log.meta['assignment']), 2)
    self.assertEqual(log.warmup_iterations(), list(range(1, 7)))

  def test_sds_without_warmup_or_adapter(self):
    cfg = small_config(mode='sds', warmup=WarmupConfig(tau=0), adapt=AdaptConfig(steps=0))
    _, log = distill(cfg, self.tokens, self.db, self.builder, self.render_cfg)
    self.assertEqual(set(log.column('vasset_norm')), {0.0})
    self.assertEqual(set(log.column('zeta_loss')), {0.0})
    self.assertIsNone(log.meta['adapter_stopped_step'])

  def test_explicit_assets(self):
    _, log = distill(small_config(), self.tokens, self.db, self.builder, self.render_cfg,
                     asset_uids=['chair-0'])
    self.assertEqual(log.meta['assets'], ['chair-0'])
    self.assertRaises(RetrievalError, distill, small_config(), self.tokens, self.db, self.builder,
                      self.render_cfg, asset_uids=['nope'])
    self.assertRaises(RetrievalError, distill, small_config(), self.tokens, EmbeddingIndex(()),
                      self.builder, self.render_cfg)

  def test_single_asset_by_rank(self):
    ranked = [r.uid for r in retrieve(self.tokens, self.db, RetrievalConfig(n_prime=3, n=2)).records]
    for rank in (0, 1):
      cfg = small_config(asset_rank=rank, iterations=2, warmup=WarmupConfig(tau=1, pose_batch=2))
      _, log = distill(cfg, self.tokens, self.db, self.builder, self.render_cfg)
      self.assertEqual(log.meta['assets'], [ranked[rank]])
      self.assertEqual(log.meta['assignment'], [0, 0])

  def test_log_keeps_the_prior(self):
    short = WarmupConfig(tau=1, pose_batch=2)
    _, log = distill(small_config(iterations=2, warmup=short), self.tokens, self.db, self.builder,
                     self.render_cfg)
    self.assertIsInstance(log.prior, AdaptedPrior)
    _, log = distill(small_config(iterations=2, warmup=short, adapt=AdaptConfig(steps=0)), self.tokens,
                     self.db, self.builder, self.render_cfg)
    self.assertIs(type(log.prior), OraclePrior)

  def test_non_finite_prior(self):
    bad = GaussianMixtureTarget([np.full(self.render_cfg.render_dim, np.nan)], [0.1], [1.0])
    cfg = small_config(mode='sds', adapt=AdaptConfig(steps=0))
    with np.errstate(invalid='ignore'):
      with self.assertRaises(NumericalError) as ctx:
        distill(cfg, self.tokens, self.db, constant_target_builder(bad), self.render_cfg)
    self.assertEqual(ctx.exception.iteration, 1)


class TestDescent(LocalTestCase):

  def test_single_view_objective_never_increases(self):
    ref = random_scene(self.rng, n=4, spread=0.5, uid='ref')
    pose = CameraPose(0.0)
    mean = render_vector(ref, pose, SMOOTH)
    builder = constant_target_builder(GaussianMixtureTarget(mean, [1e-8], [1.0]))
    db = EmbeddingIndex([build_record('ref', ['ref'], ref, SMOOTH)])
    particle = jitter(ref, self.rng, scale=0.01, uid='particle-0')
    cfg = DistillConfig(n_particles=1, iterations=100, lr=1e-4, n_points=4, n_poses=1, mode='sds',
                        delta_denoise_weight=0.0, warmup=WarmupConfig(tau=0),
                        retrieval=RetrievalConfig(n_prime=1, n=1), adapt=AdaptConfig(steps=0))

    def objective(scene):
      r = render_vector(scene, pose, SMOOTH) - mean
      return float(r.dot(r))
    values = [objective(particle)]
    distill(cfg, ['ref'], db, builder, SMOOTH, particles=ParticleSet([particle]),
            callback=lambda s, ps: values.append(objective(ps[0])))
    self.assertEqual(len(values), 101)
    for before, after in zip(values, values[1:]):
      self.assertLessEqual(after, before + 1e-6)
    self.assertLess(values[-1], values[0])
