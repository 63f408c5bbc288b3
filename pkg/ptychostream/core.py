#!/usr/bin/env python

"""Shared numeric types, image-quality metrics and geometry helpers.

Fields and images are plain 2-D numpy arrays:
  ComplexField: complex128 (solver paths) or complex64 (surrogate paths)
  RealImage: float64

Every function here is pure and may be called from any thread.
"""

import warnings

from absl import logging
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import spatial

from ptychostream import base


SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class DegenerateAlignmentWarning(UserWarning):
  """Global phase alignment had a zero inner product to work from."""


class OverlapSpec(object):
  """Step size S and beam size B (FWHM), both in grid pixels."""

  def __init__(self, step_size, beam_size):
    if not beam_size > 0:
      raise base.InvalidArgumentError(
          'beam size must be positive, got %r' % beam_size)
    if step_size < 0:
      raise base.InvalidArgumentError(
          'step size must be non-negative, got %r' % step_size)
    self.step_size = float(step_size)
    self.beam_size = float(beam_size)

  def __repr__(self):
    return '<OverlapSpec S=%g B=%g>' % (self.step_size, self.beam_size)


def OverlapRatio(spec):
  """Return 1 - S/B. Negative when the step exceeds the beam."""
  return 1.0 - spec.step_size / spec.beam_size


def StepForOverlap(beam_size, ratio):
  """Inverse of OverlapRatio: the step that gives ratio for beam_size."""
  return beam_size * (1.0 - ratio)


def CheckSameShape(a, b):
  """Raise ShapeMismatchError unless a and b have the same shape."""
  if np.shape(a) != np.shape(b):
    raise base.ShapeMismatchError(
        'shape mismatch: %s vs %s' % (np.shape(a), np.shape(b)))


def CheckImage(img, name='image'):
  """Return img as a 2-D float64 array, raising on anything else."""
  img = np.asarray(img, dtype=np.float64)
  if img.ndim != 2:
    raise base.InvalidArgumentError(
        '%s must be 2-D, got shape %s' % (name, img.shape))
  return img


def GaussianWindow(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
  """Normalized 2-D Gaussian weights of shape (size, size)."""
  r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
  g = np.exp(-(r * r) / (2.0 * sigma * sigma))
  w = np.outer(g, g)
  return w / w.sum()


def _WindowMean(img, weights):
  windows = sliding_window_view(img, weights.shape)
  return np.tensordot(windows, weights, axes=((2, 3), (0, 1)))


def SsimMap(a, b, dynamic_range):
  """Local SSIM at every valid window center.

  Args:
    a: RealImage
    b: RealImage, same shape as a
    dynamic_range: float > 0, L in C1=(K1 L)^2, C2=(K2 L)^2

  Returns:
    2-D float64 array of shape (H - 6, W - 6).

  Raises:
    ShapeMismatchError: if shapes differ.
    InvalidArgumentError: if dynamic_range <= 0 or images are smaller
      than one window.
  """
  a = CheckImage(a, 'a')
  b = CheckImage(b, 'b')
  CheckSameShape(a, b)
  if not dynamic_range > 0:
    raise base.InvalidArgumentError(
        'dynamic range must be positive, got %r' % dynamic_range)
  if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
    raise base.InvalidArgumentError(
        'images must be at least %dx%d, got %s' %
        (SSIM_WINDOW, SSIM_WINDOW, a.shape))

  w = GaussianWindow()
  c1 = (SSIM_K1 * dynamic_range) ** 2
  c2 = (SSIM_K2 * dynamic_range) ** 2

  mu_a = _WindowMean(a, w)
  mu_b = _WindowMean(b, w)
  # Products are formed so that swapping a and b gives identical bits.
  mu_ab = mu_a * mu_b
  sigma_a = _WindowMean(a * a, w) - mu_a * mu_a
  sigma_b = _WindowMean(b * b, w) - mu_b * mu_b
  sigma_ab = _WindowMean(a * b, w) - mu_ab

  num = (2.0 * mu_ab + c1) * (2.0 * sigma_ab + c2)
  den = (mu_a * mu_a + mu_b * mu_b + c1) * (sigma_a + sigma_b + c2)
  return num / den


def Ssim(a, b, dynamic_range, mask=None):
  """Mean SSIM over valid window centers.

  Args:
    a: RealImage
    b: RealImage
    dynamic_range: float > 0
    mask: optional bool array shaped like a; only window centers where mask
          is True contribute.

  Returns:
    float in [-1, 1]
  """
  smap = SsimMap(a, b, dynamic_range)
  if mask is None:
    return float(smap.mean())
  mask = np.asarray(mask, dtype=bool)
  CheckSameShape(mask, a)
  half = SSIM_WINDOW // 2
  centers = mask[half:mask.shape[0] - half, half:mask.shape[1] - half]
  if not centers.any():
    raise base.InvalidArgumentError('mask selects no window centers')
  return float(smap[centers].mean())


def Mse(a, b):
  """Mean of squared pixel differences."""
  a = np.asarray(a, dtype=np.float64)
  b = np.asarray(b, dtype=np.float64)
  CheckSameShape(a, b)
  d = a - b
  return float(np.mean(d * d))


def Mae(a, b):
  """Mean of absolute pixel differences."""
  a = np.asarray(a, dtype=np.float64)
  b = np.asarray(b, dtype=np.float64)
  CheckSameShape(a, b)
  return float(np.mean(np.abs(a - b)))


def AlignGlobalPhase(estimate, reference, mask=None):
  """Remove the global phase of estimate relative to reference.

  Args:
    estimate: ComplexField
    reference: ComplexField, same shape
    mask: optional bool array; only masked pixels enter the inner product

  Returns:
    estimate * exp(-i theta), theta = arg(sum(conj(reference) * estimate)).
    If the inner product is exactly zero, estimate is returned unchanged and
    a DegenerateAlignmentWarning is issued.
  """
  estimate = np.asarray(estimate)
  reference = np.asarray(reference)
  CheckSameShape(estimate, reference)
  prod = np.conj(reference) * estimate
  if mask is not None:
    prod = prod[np.asarray(mask, dtype=bool)]
  inner = np.sum(prod)
  if inner == 0:
    logging.warning('Degenerate global phase alignment: zero inner product')
    warnings.warn('zero inner product; field left unaligned',
                  DegenerateAlignmentWarning, stacklevel=2)
    return estimate
  theta = np.angle(inner)
  return estimate * np.exp(-1j * theta)


def AlignPhaseImage(estimate_phase, reference_phase, mask=None):
  """Remove a constant offset between two phase images.

  theta = arg(sum(exp(i (estimate - reference)))), returns estimate - theta.
  Identical inputs come back bit-identical.
  """
  est = CheckImage(estimate_phase, 'estimate_phase')
  ref = CheckImage(reference_phase, 'reference_phase')
  CheckSameShape(est, ref)
  diff = est - ref
  if mask is not None:
    diff = diff[np.asarray(mask, dtype=bool)]
  inner = np.sum(np.exp(1j * diff))
  if inner == 0:
    warnings.warn('zero inner product; phase left unaligned',
                  DegenerateAlignmentWarning, stacklevel=2)
    return est
  return est - np.angle(inner)


def DynamicRange(reference):
  """max - min of reference, or 1.0 for a flat image."""
  span = float(np.max(reference) - np.min(reference))
  return span if span > 0 else 1.0


def PhaseScore(estimate_phase, reference_phase, mask=None):
  """Accuracy as used throughout the experiments.

  Aligned phase SSIM with L = reference max - min (inside mask if given).
  """
  ref = CheckImage(reference_phase, 'reference_phase')
  aligned = AlignPhaseImage(estimate_phase, ref, mask)
  region = ref if mask is None else ref[np.asarray(mask, dtype=bool)]
  return Ssim(aligned, ref, DynamicRange(region), mask)


def LineProfile(img, row):
  """Return row `row` of img as a 1-D float array."""
  img = CheckImage(img)
  if not 0 <= row < img.shape[0]:
    raise base.InvalidArgumentError(
        'row %r out of range for height %d' % (row, img.shape[0]))
  return img[row].copy()


def MeanNearestNeighborSpacing(points):
  """Mean distance from each point to its nearest other point.

  Args:
    points: (n, 2) array, n >= 2

  Returns:
    (mean, per-point distances array)
  """
  points = np.asarray(points, dtype=np.float64)
  if len(points) < 2:
    raise base.InvalidArgumentError('need at least two points')
  dist, _ = spatial.cKDTree(points).query(points, k=2)
  nn = dist[:, 1]
  return float(nn.mean()), nn


def PatchOrigin(position, size):
  """Top-left pixel of a size x size patch centered on a scan position.

  Positions are rounded half-up to whole pixels; the sub-pixel part is
  discarded everywhere a patch is extracted or stitched.

  Args:
    position: (y, x) floats
    size: int, patch edge length

  Returns:
    (top, left) ints
  """
  y, x = position
  return (int(np.floor(y + 0.5)) - size // 2,
          int(np.floor(x + 0.5)) - size // 2)


def PatchSlices(position, size, shape):
  """Slices of a patch inside an array of `shape`.

  Raises:
    InvalidArgumentError: if the patch does not fit entirely inside shape.
  """
  top, left = PatchOrigin(position, size)
  if top < 0 or left < 0 or top + size > shape[0] or left + size > shape[1]:
    raise base.InvalidArgumentError(
        'patch of size %d at %s does not fit in %s' % (size, position, shape))
  return slice(top, top + size), slice(left, left + size)
