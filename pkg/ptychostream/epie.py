#!/usr/bin/env python

"""Extended ptychographic iterative engine.

Reconstructs the object (and optionally refines the probe) from a scan's
diffraction frames. The reconstructions serve as ground truth: their crops
become surrogate training labels and their phase images are the reference
every accuracy number is scored against.
"""

from concurrent import futures
import os

from absl import logging
import numpy as np
from scipy import fft

from ptychostream import base
from ptychostream import core
from ptychostream import image_io


class EpieError(base.Error):
  """The solver was given inputs it cannot reconstruct from."""


class EpieConfig(object):
  """Solver parameters.

  Attributes:
    alpha: float in (0, 2], object step size
    beta: float in [0, 2], probe step size; 0 freezes the probe
    n_iterations: int >= 1
    probe_update_start: int, first iteration that updates the probe
    epsilon: float, modulus guard
    shuffle_seed: int, seeds the per-iteration visiting order
  """

  def __init__(self, alpha=1.0, beta=1.0, n_iterations=200,
               probe_update_start=5, epsilon=1e-12, shuffle_seed=0):
    if not 0 < alpha <= 2:
      raise base.InvalidArgumentError('alpha must be in (0, 2], got %r' % alpha)
    if not 0 <= beta <= 2:
      raise base.InvalidArgumentError('beta must be in [0, 2], got %r' % beta)
    if n_iterations < 1:
      raise base.InvalidArgumentError(
          'n_iterations must be >= 1, got %r' % n_iterations)
    self.alpha = float(alpha)
    self.beta = float(beta)
    self.n_iterations = int(n_iterations)
    self.probe_update_start = int(probe_update_start)
    self.epsilon = float(epsilon)
    self.shuffle_seed = int(shuffle_seed)

  def __repr__(self):
    return '<EpieConfig alpha=%g beta=%g iters=%d>' % (
        self.alpha, self.beta, self.n_iterations)


class Reconstruction(object):
  """Output of the solver.

  Attributes:
    object: ComplexField
    probe: ComplexField
    errors: list of float, one RMS amplitude error per iteration
    iterations_run: int
    scan_id: int
  """

  def __init__(self, obj, probe, errors, scan_id=0):
    self.object = obj
    self.probe = probe
    self.errors = list(errors)
    self.iterations_run = len(self.errors)
    self.scan_id = scan_id

  def Amplitude(self):
    return np.abs(self.object)

  def Phase(self):
    return np.angle(self.object)

  @property
  def final_error(self):
    return self.errors[-1] if self.errors else float('nan')


class TrainingPair(object):
  """A diffraction frame and the object patch it was recorded on.

  Attributes:
    frame: DiffractionFrame
    amplitude: (K, K) float image
    phase: (K, K) float image, radians
  """

  def __init__(self, frame, amplitude, phase):
    core.CheckSameShape(amplitude, phase)
    self.frame = frame
    self.amplitude = amplitude
    self.phase = phase

  @property
  def patch_size(self):
    return self.amplitude.shape[0]

  def WithFrame(self, frame):
    return TrainingPair(frame, self.amplitude, self.phase)


def ModulusProjection(far_field, measured_amplitude, epsilon=1e-12):
  """Replace the modulus of far_field by measured_amplitude.

  Pixels where far_field is exactly zero come back as measured + 0j.
  """
  far_field = np.asarray(far_field)
  measured = np.asarray(measured_amplitude, dtype=np.float64)
  core.CheckSameShape(far_field, measured)
  mag = np.abs(far_field)
  zero = mag == 0
  out = np.empty(far_field.shape, dtype=np.complex128)
  live = ~zero
  out[live] = measured[live] * far_field[live] / (mag[live] + epsilon)
  out[zero] = measured[zero]
  return out


def _ModelPower(probe, obj, slices):
  n2 = probe.size
  total = 0.0
  for sl in slices:
    psi = probe * obj[sl]
    total += float(np.sum((psi * np.conj(psi)).real))
  return n2 * total


def EpieReconstructAmplitudes(amplitudes, positions, probe_init, object_init,
                              config=None, scan_id=0):
  """The solver on measured far-field amplitudes.

  Args:
    amplitudes: sequence of (N, N) float arrays, centered far-field moduli
    positions: (n, 2) probe centers, object pixels
    probe_init: ComplexField (N, N)
    object_init: ComplexField
    config: EpieConfig
    scan_id: int, recorded on the result

  Returns:
    Reconstruction
  """
  config = config or EpieConfig()
  positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
  if not len(amplitudes):
    raise EpieError('no frames to reconstruct from')
  if len(amplitudes) != len(positions):
    raise EpieError('%d frames but %d positions' %
                    (len(amplitudes), len(positions)))
  n = probe_init.shape[0]
  for a in amplitudes:
    if np.shape(a) != probe_init.shape:
      raise EpieError('frame shape %s does not match probe %s' %
                      (np.shape(a), probe_init.shape))

  probe = np.array(probe_init, dtype=np.complex128)
  obj = np.array(object_init, dtype=np.complex128)
  try:
    slices = [core.PatchSlices(p, n, obj.shape) for p in positions]
  except base.InvalidArgumentError as e:
    raise EpieError(str(e))

  # The loop works in unshifted DFT order.
  amps = [fft.ifftshift(np.asarray(a, dtype=np.float64)) for a in amplitudes]
  data_power = sum(float(np.sum(a * a)) for a in amps)
  model_power = _ModelPower(probe, obj, slices)
  if data_power > 0 and model_power > 0:
    scale = np.sqrt(model_power / data_power)
    amps = [a * scale for a in amps]

  update_probe = config.beta > 0
  errors = []
  n_frames = len(amps)
  for it in range(config.n_iterations):
    order = np.random.default_rng([config.shuffle_seed, it]).permutation(
        n_frames)
    sq_err = 0.0
    for j in order:
      sl = slices[j]
      patch = obj[sl].copy()
      psi = probe * patch
      far = fft.fft2(psi)
      sq_err += float(np.sum((np.abs(far) - amps[j]) ** 2))
      psi_new = fft.ifft2(ModulusProjection(far, amps[j], config.epsilon))
      diff = psi_new - psi
      p_max = float(np.max((probe * np.conj(probe)).real))
      if p_max > 0:
        obj[sl] = patch + config.alpha * np.conj(probe) / p_max * diff
      if update_probe and it >= config.probe_update_start:
        o_max = float(np.max((patch * np.conj(patch)).real))
        if o_max > 0:
          probe = probe + config.beta * np.conj(patch) / o_max * diff
    errors.append(float(np.sqrt(sq_err / (n_frames * n * n))))
    if (it + 1) % 50 == 0:
      logging.debug('ePIE scan %d iteration %d: error %.6g', scan_id, it + 1,
                    errors[-1])

  logging.info('ePIE scan %d: %d frames, %d iterations, final error %.6g',
               scan_id, n_frames, len(errors), errors[-1])
  return Reconstruction(obj, probe, errors, scan_id=scan_id)


def EpieReconstruct(frames, plan, probe_init, object_init, config=None):
  """Reconstruct from photon-count frames.

  Args:
    frames: list of DiffractionFrame, in plan order
    plan: ScanPlan
    probe_init: ComplexField
    object_init: ComplexField, typically all ones
    config: EpieConfig

  Returns:
    Reconstruction

  Raises:
    EpieError: on an empty frame list or mismatched lengths and shapes.
  """
  if not frames:
    raise EpieError('no frames to reconstruct from')
  if len(frames) != plan.n_points:
    raise EpieError('%d frames for a plan of %d points' %
                    (len(frames), plan.n_points))
  amplitudes = [np.sqrt(f.counts.astype(np.float64)) for f in frames]
  return EpieReconstructAmplitudes(amplitudes, plan.positions, probe_init,
                                   object_init, config, scan_id=plan.scan_id)


def IlluminationMask(probe, plan, shape, threshold=0.01):
  """Pixels whose accumulated |probe|^2 exceeds threshold * its maximum."""
  n = probe.shape[0]
  weight = (probe * np.conj(probe)).real
  total = np.zeros(shape)
  for p in plan.positions:
    total[core.PatchSlices(p, n, shape)] += weight
  peak = total.max()
  if peak <= 0:
    return np.zeros(shape, dtype=bool)
  return total > threshold * peak


def RemovePhaseOffset(recon, mask):
  """Pin the global phase so the median object phase inside mask is zero.

  The object is multiplied by exp(-i theta) and the probe by exp(i theta), so
  every exit wave is unchanged. Labels cropped from different scans then
  share one phase reference (the unetched background).

  Returns:
    a new Reconstruction
  """
  mask = np.asarray(mask, dtype=bool)
  if not mask.any():
    return recon
  theta = float(np.median(np.angle(recon.object[mask])))
  shift = np.exp(-1j * theta)
  return Reconstruction(recon.object * shift, recon.probe / shift,
                        recon.errors, recon.scan_id)


def CropTrainingPairs(recon, plan, frames, patch_size):
  """Pair each frame with the reconstructed object patch under it.

  Args:
    recon: Reconstruction
    plan: ScanPlan
    frames: list of DiffractionFrame, in plan order
    patch_size: int K <= probe window

  Returns:
    list of TrainingPair, one per plan position
  """
  window = recon.probe.shape[0]
  if not 0 < patch_size <= window:
    raise base.InvalidArgumentError(
        'patch size %r must be in (0, %d]' % (patch_size, window))
  if len(frames) != plan.n_points:
    raise EpieError('%d frames for a plan of %d points' %
                    (len(frames), plan.n_points))
  amplitude = recon.Amplitude()
  phase = recon.Phase()
  pairs = []
  for frame, p in zip(frames, plan.positions):
    sl = core.PatchSlices(p, patch_size, recon.object.shape)
    pairs.append(TrainingPair(frame, amplitude[sl].copy(), phase[sl].copy()))
  return pairs


class EpieJob(object):
  """A pending reconstruction; pollable from any thread."""

  def __init__(self, future, scan_id):
    self._future = future
    self.scan_id = scan_id

  def Done(self):
    return self._future.done()

  def Result(self, timeout=None):
    """Block for the Reconstruction; re-raises the solver's exception."""
    return self._future.result(timeout)


class EpieJobRunner(object):
  """Runs independent reconstructions on a thread pool."""

  def __init__(self, max_workers=2):
    self._pool = futures.ThreadPoolExecutor(max_workers=max_workers,
                                            thread_name_prefix='epie')

  def Submit(self, frames, plan, probe_init, object_init, config=None):
    logging.info('Submitting ePIE job for scan %d (%d frames)', plan.scan_id,
                 len(frames))
    future = self._pool.submit(EpieReconstruct, frames, plan, probe_init,
                               object_init, config)
    return EpieJob(future, plan.scan_id)

  def Shutdown(self, wait=True):
    self._pool.shutdown(wait=wait)


def SaveReconstruction(recon, out_dir, prefix=''):
  """Write amplitude/phase images and metadata.txt; returns the paths."""
  base.MakeDir(out_dir)
  paths = []
  paths += image_io.WriteImage(
      os.path.join(out_dir, prefix + 'amplitude.pgm'), recon.Amplitude())
  paths += image_io.WriteImage(
      os.path.join(out_dir, prefix + 'phase.pgm'), recon.Phase())
  meta = os.path.join(out_dir, prefix + 'metadata.txt')
  with open(meta, 'w') as f:
    f.write('scan_id %d\n' % recon.scan_id)
    f.write('iterations %d\n' % recon.iterations_run)
    f.write('final_error %r\n' % recon.final_error)
  paths.append(meta)
  return paths


def LoadReconstruction(out_dir, prefix=''):
  """Read what SaveReconstruction wrote.

  Returns:
    (amplitude image, phase image, metadata dict)
  """
  amplitude = image_io.ReadImage(os.path.join(out_dir, prefix + 'amplitude.pgm'))
  phase = image_io.ReadImage(os.path.join(out_dir, prefix + 'phase.pgm'))
  metadata = {}
  with open(os.path.join(out_dir, prefix + 'metadata.txt')) as f:
    for line in f:
      key, _, value = line.strip().partition(' ')
      if key:
        metadata[key] = value
  if 'scan_id' not in metadata:
    raise EpieError('metadata in %s has no scan_id' % out_dir)
  metadata['scan_id'] = int(metadata['scan_id'])
  metadata['iterations'] = int(metadata.get('iterations', 0))
  metadata['final_error'] = float(metadata.get('final_error', 'nan'))
  return amplitude, phase, metadata
