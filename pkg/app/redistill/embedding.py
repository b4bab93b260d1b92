"""
Deterministic text and image embeddings used for retrieval and alignment.

Text is a hashed bag of tokens, images are mean-subtracted 8x8 pooled
renders. Both are unit vectors in a 64-dimensional space.
"""
import logging
import math
import re
from collections import namedtuple

import numpy as np

from .errors import InputError

logger = logging.getLogger(__name__)

EMBEDDING_DIM = 64
POOL_SIZE = 8

FNV_OFFSET = 0xcbf29ce484222325
FNV_PRIME = 0x100000001b3
MASK_64 = 0xffffffffffffffff

LOW_SIGNAL_NORM = 1e-12

ImageEmbedding = namedtuple('ImageEmbedding', ['vector', 'low_signal'])


def canonical_vector():
  e = np.zeros(EMBEDDING_DIM)
  e[0] = 1.0
  return e


def fnv1a_64(data):
  h = FNV_OFFSET
  for byte in data:
    h ^= byte
    h = (h * FNV_PRIME) & MASK_64
  return h


def token_bin(token):
  """
  (bin, sign) of a token: the low six bits pick the bin, bit six the sign.
  """
  h = fnv1a_64(token.encode('utf-8'))
  return h % EMBEDDING_DIM, 1.0 if (h >> 6) & 1 else -1.0


def tokenize(text):
  return re.findall(r'[a-z0-9]+', text.lower())


def embed_text(tokens):
  if isinstance(tokens, str):
    tokens = tokenize(tokens)
  tokens = list(tokens)
  if not tokens:
    raise InputError('cannot embed an empty token list')
  vec = np.zeros(EMBEDDING_DIM)
  for token in tokens:
    b, sign = token_bin(token)
    vec[b] += sign
  norm = np.linalg.norm(vec)
  if norm == 0:
    # every token cancelled against another in the same bin
    logger.debug('Tokens %s cancel out, using canonical vector' % tokens)
    return canonical_vector()
  return vec / norm


def _pool(pixels):
  p = pixels.shape[0]
  k = POOL_SIZE // math.gcd(p, POOL_SIZE)
  if k > 1:
    pixels = np.repeat(np.repeat(pixels, k, axis=0), k, axis=1)
  block = pixels.shape[0] // POOL_SIZE
  return pixels.reshape(POOL_SIZE, block, POOL_SIZE, block).mean(axis=(1, 3))


def embed_image(image):
  pixels = np.asarray(getattr(image, 'pixels', image), dtype=float)
  if pixels.ndim != 2 or pixels.shape[0] != pixels.shape[1]:
    raise InputError('image must be a square pixel grid, got shape %s' % (pixels.shape,))
  flat = _pool(pixels).ravel()
  flat = flat - flat.mean()
  norm = np.linalg.norm(flat)
  if norm <= LOW_SIGNAL_NORM:
    return ImageEmbedding(canonical_vector(), True)
  return ImageEmbedding(flat / norm, False)


def cosine(a, b):
  a = np.asarray(a, dtype=float)
  b = np.asarray(b, dtype=float)
  denom = np.linalg.norm(a) * np.linalg.norm(b)
  if denom == 0:
    return 0.0
  return float(np.dot(a, b) / denom)
