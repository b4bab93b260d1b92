import os

REDISTILL_SEED = os.environ.get('REDISTILL_SEED')
REDISTILL_RESOLUTION = int(os.environ.get('REDISTILL_RESOLUTION', 16))
REDISTILL_SPLAT_WIDTH = float(os.environ.get('REDISTILL_SPLAT_WIDTH', 0.15))
REDISTILL_EXTENT = float(os.environ.get('REDISTILL_EXTENT', 1.5))
REDISTILL_CUTOFF = float(os.environ.get('REDISTILL_CUTOFF', 4.0))
REDISTILL_POSE_GRID = int(os.environ.get('REDISTILL_POSE_GRID', 16))
REDISTILL_DB_POSE_GRID = int(os.environ.get('REDISTILL_DB_POSE_GRID', 8))
REDISTILL_METRIC_GRID = int(os.environ.get('REDISTILL_METRIC_GRID', 24))
REDISTILL_OUTPUT_DIR = os.environ.get('REDISTILL_OUTPUT_DIR', 'output')

# long seeded experiments in the test suite only run when set
REDISTILL_ACCEPTANCE = os.environ.get('REDISTILL_ACCEPTANCE', '') not in ('', '0')
