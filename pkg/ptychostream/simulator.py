#!/usr/bin/env python

"""The measurement side of the workflow.

Builds synthetic objects, donut probes and spiral scans, computes
photon-limited far-field diffraction frames, and replays a scan as a paced
stream of wire messages into a sink.

Geometry is pixel-native: one object pixel is one reconstruction pixel is one
far-field sample. Scan positions are the centers of the probe window in
object pixel coordinates.
"""

import socket
import threading
import time

from absl import logging
import numpy as np
from PIL import Image
from PIL import ImageDraw
from PIL import ImageFont
from scipy import fft
from scipy import ndimage

from ptychostream import base
from ptychostream import core
from ptychostream import wire


GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))

RANDOM_ETCH = 'random-etch'
LETTERS = 'letters'
MIXED = 'mixed'
OBJECT_STYLES = [RANDOM_ETCH, LETTERS, MIXED]

DEFAULT_A_MIN = 0.8
DEFAULT_PHI_MAX = 1.0


class ScanPlan(object):
  """An ordered list of scan positions.

  Attributes:
    scan_id: int
    positions: (n, 2) float64 array of (y, x) grid-pixel coordinates
    step_size: float, mean nearest-neighbor spacing the plan was built for
    beam_fwhm: float or None, the beam size the scan was planned with
  """

  def __init__(self, scan_id, positions, step_size, beam_fwhm=None):
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    self.scan_id = int(scan_id)
    self.positions = positions
    self.step_size = float(step_size)
    self.beam_fwhm = beam_fwhm

  @property
  def n_points(self):
    return len(self.positions)

  def Shifted(self, dy, dx):
    """A copy of this plan translated by (dy, dx)."""
    return ScanPlan(self.scan_id, self.positions + [dy, dx], self.step_size,
                    self.beam_fwhm)

  def Subset(self, indices, step_size=None):
    """A plan keeping only `indices`, in their original order."""
    indices = np.sort(np.asarray(indices, dtype=int))
    return ScanPlan(self.scan_id, self.positions[indices],
                    self.step_size if step_size is None else step_size,
                    self.beam_fwhm)

  def WithScanId(self, scan_id):
    return ScanPlan(scan_id, self.positions, self.step_size, self.beam_fwhm)

  def OverlapRatio(self):
    if not self.beam_fwhm:
      raise base.InvalidArgumentError('plan has no beam size metadata')
    return core.OverlapRatio(core.OverlapSpec(self.step_size, self.beam_fwhm))

  def __repr__(self):
    return '<ScanPlan %d: %d points, step %.3g>' % (
        self.scan_id, self.n_points, self.step_size)


def MakeSpiralScan(n_points, step_size, scan_id=0, beam_fwhm=None):
  """Fermat spiral centered on the origin.

  Point k sits at radius c*sqrt(k) and angle k*golden_angle; c is chosen so
  the mean nearest-neighbor spacing equals step_size exactly.

  Args:
    n_points: int >= 1
    step_size: float > 0, grid pixels
    scan_id: int
    beam_fwhm: optional beam size recorded on the plan

  Returns:
    ScanPlan
  """
  if n_points < 1:
    raise base.InvalidArgumentError('n_points must be >= 1, got %r' % n_points)
  base.CheckPositive('step_size', step_size)
  k = np.arange(n_points, dtype=np.float64)
  r = np.sqrt(k)
  theta = k * GOLDEN_ANGLE
  unit = np.stack([r * np.sin(theta), r * np.cos(theta)], axis=1)
  if n_points > 1:
    unit_spacing, _ = core.MeanNearestNeighborSpacing(unit)
    unit *= step_size / unit_spacing
  return ScanPlan(scan_id, unit, step_size, beam_fwhm)


def FitSpiralScan(step_size, radius, scan_id=0, max_points=None,
                  beam_fwhm=None):
  """The longest spiral prefix whose points stay within radius.

  The returned plan's step_size is its measured mean spacing.
  """
  base.CheckPositive('radius', radius)
  base.CheckPositive('step_size', step_size)
  n = int(np.ceil(1.5 * np.pi * radius * radius /
                  (0.866 * step_size * step_size))) + 8
  plan = MakeSpiralScan(n, step_size, scan_id, beam_fwhm)
  r = np.hypot(plan.positions[:, 0], plan.positions[:, 1])
  keep = int(np.argmax(r > radius)) if np.any(r > radius) else n
  if max_points:
    keep = min(keep, max_points)
  keep = max(keep, 1)
  spacing = plan.step_size
  if keep > 1:
    spacing, _ = core.MeanNearestNeighborSpacing(plan.positions[:keep])
  return plan.Subset(np.arange(keep), step_size=spacing)


def CenterPlanOn(plan, shape):
  """Translate a plan so its origin sits at the center of an object."""
  return plan.Shifted(shape[0] // 2, shape[1] // 2)


def ThinScan(plan, target_step):
  """Select a subset of plan whose mean spacing is close to target_step.

  Points are visited in scan order and kept when no kept point lies closer
  than a threshold; the threshold is bisected so the subset's measured mean
  nearest-neighbor spacing matches target_step. The returned plan records
  the measured spacing as its step size.

  Args:
    plan: ScanPlan, the dense scan
    target_step: float, desired spacing (>= plan.step_size)

  Returns:
    ScanPlan
  """
  base.CheckPositive('target_step', target_step)
  if target_step <= plan.step_size or plan.n_points < 3:
    return plan

  def Select(threshold):
    kept = []
    for i, p in enumerate(plan.positions):
      if kept:
        d = np.hypot(*(plan.positions[kept] - p).T)
        if d.min() < threshold:
          continue
      kept.append(i)
    return kept

  def Spacing(kept):
    if len(kept) < 2:
      return np.inf
    spacing, _ = core.MeanNearestNeighborSpacing(plan.positions[kept])
    return spacing

  lo, hi = 0.0, 2.0 * target_step
  best = Select(target_step)
  for _ in range(30):
    mid = 0.5 * (lo + hi)
    kept = Select(mid)
    if Spacing(kept) < target_step:
      lo = mid
    else:
      hi = mid
      best = kept
  return plan.Subset(best, step_size=Spacing(best))


class ProbeSpec(object):
  """Donut probe parameters.

  Attributes:
    window: int, probe array edge N
    beam_fwhm: float, outer Gaussian FWHM B in grid pixels
    inner_fraction: float in [0, 1), inner FWHM as a fraction of B
    phase_curvature: float, quadratic phase in radians at the window edge
  """

  def __init__(self, window, beam_fwhm, inner_fraction=0.5,
               phase_curvature=np.pi):
    if not 0 < beam_fwhm < window:
      raise base.InvalidArgumentError(
          'need 0 < beam_fwhm < window, got %r, %r' % (beam_fwhm, window))
    if not 0 <= inner_fraction < 1:
      raise base.InvalidArgumentError(
          'inner_fraction must be in [0, 1), got %r' % inner_fraction)
    self.window = int(window)
    self.beam_fwhm = float(beam_fwhm)
    self.inner_fraction = float(inner_fraction)
    self.phase_curvature = float(phase_curvature)


def _Gaussian(r2, fwhm):
  return np.exp(-4.0 * np.log(2.0) * r2 / (fwhm * fwhm))


def MakeProbe(spec):
  """Difference-of-Gaussians donut with a quadratic phase.

  Returns:
    (N, N) complex128 field with unit peak amplitude, centered at N//2.
  """
  n = spec.window
  c = n // 2
  y, x = np.mgrid[0:n, 0:n]
  r2 = (y - c) ** 2 + (x - c) ** 2.0
  amp = _Gaussian(r2, spec.beam_fwhm)
  if spec.inner_fraction > 0:
    amp = amp - _Gaussian(r2, spec.inner_fraction * spec.beam_fwhm)
  amp = np.clip(amp, 0.0, None)
  amp /= amp.max()
  phase = spec.phase_curvature * r2 / float(c * c)
  return amp * np.exp(1j * phase)


class SyntheticObject(object):
  """A two-level complex transmission function.

  Attributes:
    field: (H, W) complex128
    a_min: float, amplitude of etched regions (unetched is 1)
    phi_max: float, phase of etched regions (unetched is 0)
    style: str in OBJECT_STYLES
    seed: int
    etched: (H, W) bool mask
  """

  def __init__(self, field, a_min, phi_max, style, seed, etched):
    self.field = field
    self.a_min = a_min
    self.phi_max = phi_max
    self.style = style
    self.seed = seed
    self.etched = etched

  @property
  def shape(self):
    return self.field.shape

  def Amplitude(self):
    return np.abs(self.field)

  def Phase(self):
    return np.where(self.etched, self.phi_max, 0.0)


def _EtchMask(height, width, rng, feature_size=3.0, etched_fraction=0.4):
  noise = rng.standard_normal((height, width))
  smooth = ndimage.gaussian_filter(noise, feature_size, mode='wrap')
  return smooth > np.percentile(smooth, 100.0 * (1.0 - etched_fraction))


def _LetterMask(height, width, rng, scale=4):
  small = Image.new('L', (max(1, width // scale), max(1, height // scale)), 0)
  draw = ImageDraw.Draw(small)
  font = ImageFont.load_default()
  alphabet = 'ABCDEFGHIJKLMNOPQRSTUVWXYZ'
  line_height = 12
  for row in range(0, small.size[1], line_height):
    text = ''.join(rng.choice(list(alphabet), size=small.size[0] // 6 + 1))
    draw.text((1, row), text, fill=255, font=font)
  big = small.resize((width, height), Image.NEAREST)
  return np.asarray(big) > 127


def SynthObject(height, width, style=RANDOM_ETCH, seed=0,
                a_min=DEFAULT_A_MIN, phi_max=DEFAULT_PHI_MAX,
                probe_window=None):
  """Build a deterministic synthetic object.

  Args:
    height: int
    width: int
    style: 'random-etch' (smoothed random blobs), 'letters' (rasterized
           glyphs) or 'mixed' (etch on the left half, letters on the right)
    seed: int
    a_min: float in (0, 1], amplitude of etched regions
    phi_max: float >= 0, phase of etched regions in radians
    probe_window: optional int; if given, both dimensions must be at least
                  four times this

  Returns:
    SyntheticObject
  """
  if height <= 0 or width <= 0:
    raise base.InvalidArgumentError('bad object size %dx%d' % (height, width))
  if probe_window is not None and min(height, width) < 4 * probe_window:
    raise base.InvalidArgumentError(
        'object %dx%d smaller than 4x probe window %d' %
        (height, width, probe_window))
  if not 0 < a_min <= 1:
    raise base.InvalidArgumentError('a_min must be in (0, 1], got %r' % a_min)
  if phi_max < 0:
    raise base.InvalidArgumentError('phi_max must be >= 0, got %r' % phi_max)
  if style not in OBJECT_STYLES:
    raise base.InvalidArgumentError(
        'style must be one of %s, got %r' % (OBJECT_STYLES, style))

  rng = np.random.default_rng(seed)
  if style == RANDOM_ETCH:
    etched = _EtchMask(height, width, rng)
  elif style == LETTERS:
    etched = _LetterMask(height, width, rng)
  else:
    etched = _EtchMask(height, width, rng)
    half = width // 2
    etched[:, half:] = _LetterMask(height, width - half, rng)

  amplitude = np.where(etched, a_min, 1.0)
  phase = np.where(etched, phi_max, 0.0)
  field = amplitude * np.exp(1j * phase)
  return SyntheticObject(field, a_min, phi_max, style, seed, etched)


class DiffractionFrame(object):
  """One detector exposure.

  Attributes:
    scan_id: int
    frame_index: int
    position: (y, x) floats
    exposure_ms: float
    counts: (N, N) uint16
    max_count: int, cached maximum of counts
  """

  def __init__(self, scan_id, frame_index, position, exposure_ms, counts):
    counts = np.asarray(counts)
    if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
      raise base.InvalidArgumentError(
          'counts must be square, got shape %s' % (counts.shape,))
    if counts.dtype != np.uint16:
      if counts.size and (counts.min() < 0 or counts.max() > base.MAX_COUNT):
        raise base.InvalidArgumentError('counts outside the 16-bit range')
      counts = counts.astype(np.uint16)
    self.scan_id = int(scan_id)
    self.frame_index = int(frame_index)
    self.position = (float(position[0]), float(position[1]))
    self.exposure_ms = float(exposure_ms)
    self.counts = counts
    self.max_count = int(counts.max()) if counts.size else 0

  @property
  def size(self):
    return self.counts.shape[0]

  def WithCounts(self, counts, exposure_ms=None):
    return DiffractionFrame(
        self.scan_id, self.frame_index, self.position,
        self.exposure_ms if exposure_ms is None else exposure_ms, counts)

  def __eq__(self, other):
    if not isinstance(other, DiffractionFrame):
      return False
    return (self.scan_id == other.scan_id and
            self.frame_index == other.frame_index and
            self.position == other.position and
            self.exposure_ms == other.exposure_ms and
            np.array_equal(self.counts, other.counts))

  def __ne__(self, other):
    return not self == other

  def __repr__(self):
    return '<DiffractionFrame scan %d #%d at (%.2f, %.2f), max %d>' % (
        self.scan_id, self.frame_index, self.position[0], self.position[1],
        self.max_count)


def ExitWave(obj_field, probe, position):
  """probe * object patch at position."""
  n = probe.shape[0]
  sl = core.PatchSlices(position, n, obj_field.shape)
  return probe * obj_field[sl]


def FarFieldIntensity(obj_field, probe, position):
  """Noiseless, unnormalized |centered DFT(exit wave)|^2.

  Returns:
    (intensity, exit_wave)
  """
  psi = ExitWave(obj_field, probe, position)
  far = fft.fftshift(fft.fft2(psi))
  return (far * np.conj(far)).real, psi


def ExpectedCounts(obj_field, probe, position, photon_budget):
  """Mean photon counts per pixel, summing to photon_budget."""
  if photon_budget < 0:
    raise base.InvalidArgumentError(
        'photon budget must be >= 0, got %r' % photon_budget)
  intensity, _ = FarFieldIntensity(obj_field, probe, position)
  total = intensity.sum()
  if photon_budget == 0 or total == 0:
    return np.zeros_like(intensity)
  return intensity * (photon_budget / total)


def Diffract(obj_field, probe, position, photon_budget, rng, scan_id=0,
             frame_index=0, exposure_ms=1.0, noise=True):
  """Simulate one detector frame.

  Args:
    obj_field: ComplexField, the object transmission function
    probe: ComplexField (N, N)
    position: (y, x) probe center in object pixels
    photon_budget: float >= 0, expected total photons in the frame
    rng: numpy Generator used for Poisson draws
    scan_id, frame_index, exposure_ms: frame metadata
    noise: bool; when False the expected counts are rounded instead of drawn

  Returns:
    DiffractionFrame with counts clipped to 16 bits
  """
  mean = ExpectedCounts(obj_field, probe, position, photon_budget)
  if noise:
    counts = rng.poisson(mean)
  else:
    counts = np.rint(mean)
  counts = np.clip(counts, 0, base.MAX_COUNT).astype(np.uint16)
  return DiffractionFrame(scan_id, frame_index, position, exposure_ms, counts)


def SimulateScan(obj_field, probe, plan, photon_budget, seed, exposure_ms=1.0,
                 noise=True):
  """Every frame of plan, deterministic for a fixed seed."""
  rng = np.random.default_rng(seed)
  return [Diffract(obj_field, probe, p, photon_budget, rng,
                   scan_id=plan.scan_id, frame_index=i,
                   exposure_ms=exposure_ms, noise=noise)
          for i, p in enumerate(plan.positions)]


def WriteCapture(path, frames):
  """Write frames as concatenated wire FRAME messages."""
  with open(path, 'wb') as f:
    for frame in frames:
      f.write(wire.Encode(wire.FrameMessage(frame)))
  return path


def ReadCapture(path):
  """Read every FRAME message of a capture file, in order."""
  decoder = wire.Decoder()
  frames = []
  with open(path, 'rb') as f:
    while True:
      chunk = f.read(1 << 20)
      if not chunk:
        break
      for msg in decoder.Feed(chunk):
        if isinstance(msg, wire.FrameMessage):
          frames.append(msg.frame)
  if decoder.Pending():
    raise wire.TruncatedMessageError(
        '%d trailing bytes in capture %s' % (decoder.Pending(), path))
  return frames


class Sink(object):
  """Receives the encoded messages of a scan stream."""

  def Send(self, data):
    raise NotImplementedError

  def Close(self):
    pass


class ListSink(Sink):
  """Keeps every encoded message in memory."""

  def __init__(self):
    self.chunks = []

  def Send(self, data):
    self.chunks.append(bytes(data))

  def Messages(self):
    return wire.DecodeAll(b''.join(self.chunks))


class CaptureSink(Sink):
  """Appends the stream to a replayable capture file."""

  def __init__(self, path):
    self._file = open(path, 'wb')

  def Send(self, data):
    self._file.write(data)

  def Close(self):
    self._file.close()


class FanoutSink(Sink):
  """Sends every message to several sinks, in order."""

  def __init__(self, sinks):
    self.sinks = list(sinks)

  def Send(self, data):
    for s in self.sinks:
      s.Send(data)

  def Close(self):
    for s in self.sinks:
      s.Close()


class TcpSink(Sink):
  """Streams to a wire endpoint and collects whatever the peer sends back.

  RESULT messages and echoed SCAN_END messages from the edge service are
  gathered by a background reader so the producer never blocks on them.
  """

  def __init__(self, endpoint, connect_timeout=10.0):
    host, port = endpoint
    self._sock = socket.create_connection((host, port),
                                          timeout=connect_timeout)
    self._sock.settimeout(None)
    self._lock = threading.Condition()
    self.results = []
    self.scans_ended = set()
    self.error = None
    self._reader = threading.Thread(target=self._Read, name='tcp-sink-reader')
    self._reader.daemon = True
    self._reader.start()

  def _Read(self):
    try:
      for msg in wire.ReadMessages(self._sock):
        with self._lock:
          if isinstance(msg, wire.ResultMessage):
            self.results.append(msg)
          elif isinstance(msg, wire.ScanEnd):
            self.scans_ended.add(msg.scan_id)
          self._lock.notify_all()
    except (OSError, base.Error) as e:
      with self._lock:
        self.error = e
        self._lock.notify_all()

  def Send(self, data):
    self._sock.sendall(data)

  def WaitForScanEnd(self, scan_id, timeout=None):
    """Block until the peer echoes SCAN_END for scan_id; returns success."""
    deadline = None if timeout is None else time.monotonic() + timeout
    with self._lock:
      while scan_id not in self.scans_ended and self.error is None:
        remaining = None if deadline is None else deadline - time.monotonic()
        if remaining is not None and remaining <= 0:
          return False
        self._lock.wait(remaining)
      return scan_id in self.scans_ended

  def Close(self):
    try:
      self._sock.shutdown(socket.SHUT_WR)
    except OSError:
      pass
    self._reader.join(timeout=30)
    self._sock.close()


class StreamReport(object):
  """How a scan stream went.

  Attributes:
    scan_id: int
    frames_sent: int
    wall_time_s: float
    achieved_rate_hz: float
    error: str or None, set when the sink failed part way
  """

  def __init__(self, scan_id, frames_sent, wall_time_s, error=None):
    self.scan_id = scan_id
    self.frames_sent = frames_sent
    self.wall_time_s = wall_time_s
    self.achieved_rate_hz = (frames_sent / wall_time_s
                             if wall_time_s > 0 else 0.0)
    self.error = error

  @property
  def completed(self):
    return self.error is None

  def __repr__(self):
    return '<StreamReport scan %d: %d frames in %.3fs (%.1f Hz)%s>' % (
        self.scan_id, self.frames_sent, self.wall_time_s,
        self.achieved_rate_hz, ' FAILED' if self.error else '')


def RunScanStream(obj_field, probe, plan, photon_budget, frame_rate_hz, sink,
                  seed=0, frames=None, patch_size=None,
                  clock=time.monotonic, sleep=time.sleep):
  """Replay a scan into sink as SCAN_BEGIN, FRAME..., SCAN_END.

  Args:
    obj_field: ComplexField
    probe: ComplexField (N, N)
    plan: ScanPlan
    photon_budget: float, expected photons per frame
    frame_rate_hz: float; 0 or None disables pacing
    sink: Sink
    seed: int, Poisson seed when frames are simulated on the fly
    frames: optional precomputed DiffractionFrames (replayed as-is)
    patch_size: K announced in SCAN_BEGIN, default N // 2
    clock, sleep: injectable time sources

  Returns:
    StreamReport; on sink failure the report is partial and carries the error
  """
  n = probe.shape[0]
  k = patch_size or n // 2
  rng = np.random.default_rng(seed)
  period = 1.0 / frame_rate_hz if frame_rate_hz else 0.0
  sent = 0
  start = clock()
  try:
    sink.Send(wire.Encode(wire.ScanBegin(plan.scan_id, plan.n_points, n, k)))
    for i, position in enumerate(plan.positions):
      if frames is not None:
        frame = frames[i]
      else:
        frame = Diffract(obj_field, probe, position, photon_budget, rng,
                         scan_id=plan.scan_id, frame_index=i)
      if period:
        delay = start + i * period - clock()
        if delay > 0:
          sleep(delay)
      sink.Send(wire.Encode(wire.FrameMessage(frame)))
      sent += 1
    sink.Send(wire.Encode(wire.ScanEnd(plan.scan_id)))
  except (OSError, base.Error) as e:
    logging.error('Scan %d stream aborted after %d frames: %s',
                  plan.scan_id, sent, e)
    return StreamReport(plan.scan_id, sent, clock() - start, error=str(e))
  report = StreamReport(plan.scan_id, sent, clock() - start)
  logging.info('Streamed %r', report)
  return report
