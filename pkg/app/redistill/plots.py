"""
Minimal SVG line plots for run artifacts.
"""
import numpy as np

WIDTH = 480
HEIGHT = 320
MARGIN = 40
COLOURS = ('#1f77b4', '#d62728', '#2ca02c', '#9467bd', '#ff7f0e', '#8c564b', '#17becf', '#7f7f7f')


def pca_2d(points):
  """
  Projects rows onto their first two principal directions.
  """
  points = np.asarray(points, dtype=float)
  centred = points - points.mean(axis=0)
  if points.shape[0] < 2 or not np.any(centred):
    return np.zeros((points.shape[0], 2))
  _, _, vt = np.linalg.svd(centred, full_matrices=False)
  basis = vt[:2]
  if basis.shape[0] < 2:
    basis = np.vstack([basis, np.zeros_like(basis)])
  return centred.dot(basis.T)


def _scale(values, lo, hi):
  vmin, vmax = float(np.min(values)), float(np.max(values))
  if vmax == vmin:
    return np.full(len(values), (lo + hi) / 2.0)
  return lo + (np.asarray(values, dtype=float) - vmin) * (hi - lo) / (vmax - vmin)


def _polyline(xs, ys, colour):
  points = ' '.join('%.2f,%.2f' % (x, y) for x, y in zip(xs, ys))
  return '<polyline fill="none" stroke="%s" stroke-width="1.5" points="%s"/>' % (colour, points)


def _document(title, body):
  return '\n'.join([
    '<svg xmlns="http://www.w3.org/2000/svg" width="%d" height="%d" viewBox="0 0 %d %d">'
    % (WIDTH, HEIGHT, WIDTH, HEIGHT),
    '<rect width="100%" height="100%" fill="white"/>',
    '<text x="%d" y="20" font-family="sans-serif" font-size="13">%s</text>' % (MARGIN, title),
    '<rect x="%d" y="%d" width="%d" height="%d" fill="none" stroke="#999"/>'
    % (MARGIN, MARGIN, WIDTH - 2 * MARGIN, HEIGHT - 2 * MARGIN),
  ] + body + ['</svg>', ''])


def trajectory_svg(trajectories, title='particle render trajectories (PCA)'):
  """
  trajectories: one list of render vectors per particle. All points share
  one projection so particles are comparable.
  """
  lengths = [len(t) for t in trajectories]
  flat = np.vstack([np.asarray(t, dtype=float) for t in trajectories])
  proj = pca_2d(flat)
  xs = _scale(proj[:, 0], MARGIN, WIDTH - MARGIN)
  ys = _scale(-proj[:, 1], MARGIN, HEIGHT - MARGIN)
  body = []
  start = 0
  for i, n in enumerate(lengths):
    colour = COLOURS[i % len(COLOURS)]
    body.append(_polyline(xs[start:start + n], ys[start:start + n], colour))
    body.append('<circle cx="%.2f" cy="%.2f" r="3" fill="%s"/>'
                % (xs[start + n - 1], ys[start + n - 1], colour))
    start += n
  return _document(title, body)


def velocity_svg(series, title='velocity norms'):
  """
  series: mapping of name -> list of (iteration, value).
  """
  everything = [p for points in series.values() for p in points]
  if not everything:
    return _document(title, [])
  iters = np.array([p[0] for p in everything], dtype=float)
  values = np.array([p[1] for p in everything], dtype=float)
  x_lo, x_hi = iters.min(), iters.max()
  v_lo, v_hi = values.min(), values.max()
  body = []
  for i, (name, points) in enumerate(sorted(series.items())):
    colour = COLOURS[i % len(COLOURS)]
    its = np.array([p[0] for p in points] + [x_lo, x_hi], dtype=float)
    vals = np.array([p[1] for p in points] + [v_lo, v_hi], dtype=float)
    xs = _scale(its, MARGIN, WIDTH - MARGIN)[:-2]
    ys = _scale(-vals, MARGIN, HEIGHT - MARGIN)[:-2]
    body.append(_polyline(xs, ys, colour))
    body.append('<text x="%d" y="%d" font-family="sans-serif" font-size="11" fill="%s">%s</text>'
                % (WIDTH - MARGIN - 120, MARGIN + 14 * (i + 1), colour, name))
  return _document(title, body)


def write_svg(path, document):
  with open(path, 'w') as f:
    f.write(document)
