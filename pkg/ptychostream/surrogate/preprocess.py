#!/usr/bin/env python

"""Frame normalization for the surrogate, and dose attenuation of pairs."""

import numpy as np

from ptychostream import base


NORMALIZATION_PERCENTILE = 99.9


def Normalize(counts, scale_factor=1.0):
  """counts * scale_factor over its 99.9th percentile (at least 1), in [0, 1].

  Returns:
    (N, N) float32
  """
  base.CheckPositive('scale_factor', scale_factor)
  v = np.asarray(counts, dtype=np.float64) * scale_factor
  denom = max(float(np.percentile(v, NORMALIZATION_PERCENTILE)), 1.0)
  return np.clip(v / denom, 0.0, 1.0).astype(np.float32)


def Preprocess(frame, scale_factor=1.0):
  """One frame as a (1, 1, N, N) float32 network input."""
  return Normalize(frame.counts, scale_factor)[None, None]


def PreprocessBatch(frames, scale_factor=1.0):
  """Frames as a (B, 1, N, N) float32 batch."""
  if not len(frames):
    raise base.InvalidArgumentError('empty batch')
  return np.stack([Normalize(f.counts, scale_factor) for f in frames])[:, None]


def AttenuateCounts(counts, factor, rng, noise=True):
  """Poisson(counts / factor), or rounded counts / factor without noise."""
  if not factor >= 1:
    raise base.InvalidArgumentError('factor must be >= 1, got %r' % factor)
  mean = np.asarray(counts, dtype=np.float64) / factor
  if noise:
    out = rng.poisson(mean)
  else:
    out = np.rint(mean)
  return np.clip(out, 0, base.MAX_COUNT).astype(np.uint16)


def AttenuateTrainingPair(pair, factor, rng, noise=True):
  """The same pair with a low-dose frame; labels are untouched."""
  frame = pair.frame
  counts = AttenuateCounts(frame.counts, factor, rng, noise)
  return pair.WithFrame(frame.WithCounts(counts,
                                         exposure_ms=frame.exposure_ms / factor))


def LogSpacedFactors(low, high, n):
  """n attenuation factors spaced evenly in log10 between low and high."""
  if n < 1 or not 1 <= low <= high:
    raise base.InvalidArgumentError(
        'need n >= 1 and 1 <= low <= high, got %r, %r, %r' % (n, low, high))
  if n == 1:
    return [float(low)]
  return [float(f) for f in np.logspace(np.log10(low), np.log10(high), n)]
