#!/usr/bin/env python

"""The live inference service.

Each frame connection runs a three-stage pipeline:

  reader      decodes wire messages into a bounded queue; a full queue
              blocks the reader, which stops draining the socket
  inference   groups frames into batches and runs the current model
  writer      stitches results into the scan's canvas and sends RESULT
              messages back, echoing SCAN_END after the scan's last result

Models arrive on a separate connection as MODEL messages and are swapped in
between batches.
"""

import collections
import os
import queue
import socket
import threading
import time

from absl import logging
import numpy as np

from ptychostream import base
from ptychostream import core
from ptychostream import image_io
from ptychostream import wire
from ptychostream.surrogate import model as model_lib
from ptychostream.surrogate import serialization


DEFAULT_QUEUE_SIZE = 10000
DEFAULT_CANVAS_SHAPE = (256, 256)
DEFAULT_KEEP_FINISHED = 4
LATENCY_CSV_HEADER = ['batch_size', 'mean_us', 'std_us', 'p50_us', 'p90_us',
                      'p99_us', 'frames']

_STOP = object()


class StaleModelError(base.Error):
  """A pushed model is not newer than the one being served."""


class BatcherConfig(object):
  """Attributes:
    batch_size: int >= 1
    flush_timeout_s: float > 0, inactivity that flushes a partial batch
    scale_factor: float > 0, passed to preprocessing
  """

  def __init__(self, batch_size=8, flush_timeout_s=0.010, scale_factor=1.0):
    if batch_size < 1:
      raise base.InvalidArgumentError(
          'batch_size must be >= 1, got %r' % batch_size)
    base.CheckPositive('flush_timeout_s', flush_timeout_s)
    base.CheckPositive('scale_factor', scale_factor)
    self.batch_size = int(batch_size)
    self.flush_timeout_s = float(flush_timeout_s)
    self.scale_factor = float(scale_factor)


class QueuedFrame(object):
  __slots__ = ('frame', 'received')

  def __init__(self, frame, received):
    self.frame = frame
    self.received = received


def BatchFrames(in_queue, config):
  """Group queued items into batches.

  Frames are yielded as lists of up to batch_size items, in arrival order. A
  partial batch is flushed after flush_timeout_s without arrivals, and
  before any control message, which is then yielded on its own. The
  generator ends after the stop marker, flushing what it holds.

  Args:
    in_queue: queue.Queue of frame items, wire control messages and _STOP
    config: BatcherConfig
  """
  pending = []
  while True:
    try:
      item = in_queue.get(timeout=config.flush_timeout_s if pending else None)
    except queue.Empty:
      yield pending
      pending = []
      continue
    if item is _STOP:
      if pending:
        yield pending
      return
    if isinstance(item, wire.Message):
      if pending:
        yield pending
        pending = []
      yield item
      continue
    pending.append(item)
    if len(pending) == config.batch_size:
      yield pending
      pending = []


class StitchCanvas(object):
  """Running average of patches placed on a fixed grid.

  Single writer; Snapshot may be called from any thread.
  """

  def __init__(self, height, width):
    if height <= 0 or width <= 0:
      raise base.InvalidArgumentError('bad canvas size %dx%d' % (height, width))
    self.height = height
    self.width = width
    self.amplitude_sum = np.zeros((height, width))
    self.phase_sum = np.zeros((height, width))
    self.count = np.zeros((height, width), dtype=np.int64)
    self.frames_stitched = 0
    self.clipped_patches = 0
    self._lock = threading.Lock()

  @property
  def shape(self):
    return (self.height, self.width)

  def Stitch(self, amplitude, phase, position):
    """Add one K x K patch centered on position.

    Patches reaching past the canvas edge are clipped and counted.
    """
    core.CheckSameShape(amplitude, phase)
    k = amplitude.shape[0]
    top, left = core.PatchOrigin(position, k)
    y0, x0 = max(top, 0), max(left, 0)
    y1, x1 = min(top + k, self.height), min(left + k, self.width)
    with self._lock:
      self.frames_stitched += 1
      if (y0, x0, y1, x1) != (top, left, top + k, left + k):
        self.clipped_patches += 1
        logging.warning('Patch at %s clipped to canvas %dx%d', position,
                        self.height, self.width)
      if y1 <= y0 or x1 <= x0:
        return
      src = (slice(y0 - top, y1 - top), slice(x0 - left, x1 - left))
      dst = (slice(y0, y1), slice(x0, x1))
      self.amplitude_sum[dst] += amplitude[src]
      self.phase_sum[dst] += phase[src]
      self.count[dst] += 1

  def Snapshot(self):
    """(amplitude, phase) read-outs: sum / max(count, 1)."""
    with self._lock:
      denom = np.maximum(self.count, 1)
      return self.amplitude_sum / denom, self.phase_sum / denom

  def Covered(self):
    with self._lock:
      return self.count > 0

  def Dump(self, out_dir, prefix):
    """Write the read-outs as PGM+range pairs; returns the paths."""
    amplitude, phase = self.Snapshot()
    paths = image_io.WriteImage(
        os.path.join(out_dir, prefix + '_amplitude.pgm'), amplitude)
    paths += image_io.WriteImage(
        os.path.join(out_dir, prefix + '_phase.pgm'), phase)
    return paths


class ModelHandle(object):
  """The model being served, replaced atomically."""

  def __init__(self, model=None):
    self._model = model
    self._cond = threading.Condition()

  def Get(self):
    with self._cond:
      return self._model

  @property
  def version(self):
    model = self.Get()
    return model.version if model is not None else None

  def Swap(self, model):
    """Install model.

    Raises:
      StaleModelError: unless model.version exceeds the current version.
    """
    with self._cond:
      if self._model is not None and model.version <= self._model.version:
        raise StaleModelError('model v%d is not newer than v%d' %
                              (model.version, self._model.version))
      self._model = model
      self._cond.notify_all()
    logging.info('Now serving model v%d', model.version)

  def WaitForModel(self, timeout=None):
    """Block until a model is installed; None on timeout."""
    with self._cond:
      self._cond.wait_for(lambda: self._model is not None, timeout)
      return self._model


class LatencyReport(object):
  """Per-frame latency statistics.

  Attributes:
    p50_us, p90_us, p99_us: quantiles over every frame, microseconds
    frames: int
    rows: list of [batch_size, mean_us, std_us, p50_us, p90_us, p99_us,
          frames], one per batch size seen
    model_versions: sorted list of the versions that produced results
  """

  def __init__(self, samples, model_versions=()):
    by_size = collections.defaultdict(list)
    for batch_size, latency in samples:
      by_size[batch_size].append(latency)
    all_us = np.array([s[1] for s in samples]) * 1e6
    self.frames = len(all_us)
    self.p50_us, self.p90_us, self.p99_us = (
        float(q) for q in np.percentile(all_us, [50, 90, 99]))
    self.model_versions = sorted(set(model_versions))
    self.rows = []
    for batch_size in sorted(by_size):
      us = np.array(by_size[batch_size]) * 1e6
      p50, p90, p99 = np.percentile(us, [50, 90, 99])
      self.rows.append([batch_size, float(us.mean()), float(us.std()),
                        float(p50), float(p90), float(p99), len(us)])

  def WriteCsv(self, path):
    return image_io.WriteCsv(path, LATENCY_CSV_HEADER, self.rows)

  def __repr__(self):
    return '<LatencyReport %d frames p50 %.1fus p99 %.1fus>' % (
        self.frames, self.p50_us, self.p99_us)


class LatencyRecorder(object):
  """Collects (batch size, per-frame latency) samples from any thread."""

  def __init__(self):
    self._samples = []
    self._versions = set()
    self._lock = threading.Lock()

  def Record(self, batch_size, latency_s, model_version=None):
    with self._lock:
      self._samples.append((batch_size, latency_s))
      if model_version is not None:
        self._versions.add(model_version)

  @property
  def frames(self):
    with self._lock:
      return len(self._samples)

  def Report(self):
    """Raises EmptyReportError if nothing was recorded."""
    with self._lock:
      samples = list(self._samples)
      versions = set(self._versions)
    if not samples:
      raise base.EmptyReportError('no frames have been processed')
    return LatencyReport(samples, versions)


class EdgeConfig(object):
  """Attributes:
    batcher: BatcherConfig
    queue_size: int, frames buffered per connection before backpressure
    canvas_shape: (height, width) of each scan's canvas
    dump_every: int, dump the canvas every this many stitched frames (0 off)
    out_dir: str or None, where canvases are dumped
    keep_finished: int, canvases of ended scans kept in memory; older ones
      are dropped once their final dump is written
  """

  def __init__(self, batcher=None, queue_size=DEFAULT_QUEUE_SIZE,
               canvas_shape=DEFAULT_CANVAS_SHAPE, dump_every=0, out_dir=None,
               keep_finished=DEFAULT_KEEP_FINISHED):
    if keep_finished < 0:
      raise base.InvalidArgumentError(
          'keep_finished must be >= 0, got %r' % keep_finished)
    self.batcher = batcher or BatcherConfig()
    self.queue_size = int(queue_size)
    self.canvas_shape = tuple(canvas_shape)
    self.dump_every = int(dump_every)
    self.out_dir = out_dir
    self.keep_finished = int(keep_finished)


class _Connection(object):
  """Per-connection pipeline state."""

  def __init__(self, sock, queue_size):
    self.sock = sock
    self.frames_in = queue.Queue(maxsize=queue_size)
    self.results_out = queue.Queue()
    self.closing = threading.Event()
    self.errors = []
    self.lock = threading.Lock()

  def Fail(self, e):
    with self.lock:
      self.errors.append(e)
    self.closing.set()


class EdgeService(object):
  """Serves inference for any number of frame connections.

  Attributes:
    handle: ModelHandle
    recorder: LatencyRecorder
    canvases: dict scan_id -> StitchCanvas, the canvas of each open scan and
      of the last config.keep_finished ended ones
    results_sent: int
    dumped: list of paths written by canvas dumps
  """

  def __init__(self, config=None, model=None, clock=time.monotonic):
    self.config = config or EdgeConfig()
    self.handle = ModelHandle(model)
    self.recorder = LatencyRecorder()
    self.canvases = {}
    self.results_sent = 0
    self._finished = collections.deque()
    self.dumped = []
    self._clock = clock
    self._lock = threading.Lock()
    self._stopping = threading.Event()

  def SwapModel(self, payload):
    """Install a serialized model; returns the Ack to send back."""
    try:
      model = serialization.Deserialize(payload)
    except serialization.ModelFormatError as e:
      logging.error('Rejected corrupt model push: %s', e)
      return wire.Ack(0, wire.ACK_CORRUPT, str(e))
    try:
      self.handle.Swap(model)
    except StaleModelError as e:
      logging.warning('Rejected stale model push: %s', e)
      return wire.Ack(model.version, wire.ACK_STALE, str(e))
    return wire.Ack(model.version)

  def HandleModelConnection(self, sock):
    """Serve MODEL pushes on sock until the peer closes it."""
    try:
      for msg in wire.ReadMessages(sock):
        if isinstance(msg, wire.ModelMessage):
          wire.SendMessage(sock, self.SwapModel(msg.payload))
        elif not isinstance(msg, wire.Heartbeat):
          logging.warning('Ignoring %r on the model connection', msg)
    except (OSError, wire.WireError) as e:
      logging.error('Model connection failed: %s', e)
    finally:
      sock.close()

  def HandleConnection(self, sock):
    """Run the frame pipeline on a connected socket until the peer is done.

    Returns after every queued frame was inferred and its result written.

    Raises:
      The first error any stage hit.
    """
    conn = _Connection(sock, self.config.queue_size)
    threads = [
        threading.Thread(target=self._ReadLoop, args=(conn,),
                         name='edge-reader'),
        threading.Thread(target=self._InferLoop, args=(conn,),
                         name='edge-infer'),
        threading.Thread(target=self._WriteLoop, args=(conn,),
                         name='edge-writer'),
    ]
    for t in threads:
      t.daemon = True
      t.start()
    for t in threads:
      t.join()
    try:
      sock.shutdown(socket.SHUT_WR)
    except OSError:
      pass
    if conn.errors:
      raise conn.errors[0]

  def Stop(self):
    self._stopping.set()

  def _Put(self, conn, item):
    while True:
      try:
        conn.frames_in.put(item, timeout=0.1)
        return
      except queue.Full:
        if conn.closing.is_set() or self._stopping.is_set():
          raise base.ServiceError('pipeline stopped while queue was full')

  def _ReadLoop(self, conn):
    try:
      for msg in wire.ReadMessages(conn.sock):
        if isinstance(msg, wire.FrameMessage):
          self._Put(conn, QueuedFrame(msg.frame, self._clock()))
        elif isinstance(msg, (wire.ScanBegin, wire.ScanEnd)):
          self._Put(conn, msg)
        elif not isinstance(msg, wire.Heartbeat):
          logging.warning('Ignoring %r on a frame connection', msg)
    except (OSError, base.Error) as e:
      logging.error('Frame connection failed: %s', e)
      conn.Fail(e)
    finally:
      conn.frames_in.put(_STOP)

  def _WaitForModel(self, conn):
    while True:
      model = self.handle.WaitForModel(timeout=0.1)
      if model is not None:
        return model
      if conn.closing.is_set() or self._stopping.is_set():
        return None

  def _InferLoop(self, conn):
    try:
      for item in BatchFrames(conn.frames_in, self.config.batcher):
        if isinstance(item, wire.Message):
          conn.results_out.put(item)
          continue
        model = self._WaitForModel(conn)
        if model is None:
          raise base.ServiceError(
              'no model arrived; %d frames left uninferred' % len(item))
        frames = [q.frame for q in item]
        amplitude, phase = model_lib.Infer(model, frames,
                                           self.config.batcher.scale_factor)
        done = self._clock()
        for i, q in enumerate(item):
          f = q.frame
          self.recorder.Record(len(item), done - q.received, model.version)
          conn.results_out.put(wire.ResultMessage(
              f.scan_id, f.frame_index, model.version, f.position,
              amplitude[i], phase[i]))
    except Exception as e:  # pylint: disable=broad-except
      logging.exception('Inference worker failed')
      conn.Fail(e)
      # Drain so the reader never blocks on a full queue.
      while conn.frames_in.get() is not _STOP:
        pass
    finally:
      conn.results_out.put(_STOP)

  def _Canvas(self, scan_id):
    with self._lock:
      canvas = self.canvases.get(scan_id)
      if canvas is None:
        canvas = StitchCanvas(*self.config.canvas_shape)
        self.canvases[scan_id] = canvas
      return canvas

  def _Finish(self, scan_id):
    with self._lock:
      if scan_id in self._finished:
        self._finished.remove(scan_id)
      self._finished.append(scan_id)
      while len(self._finished) > self.config.keep_finished:
        evicted = self._finished.popleft()
        self.canvases.pop(evicted, None)
        logging.debug('Dropped canvas of finished scan %d', evicted)

  def _Dump(self, scan_id, canvas, tag):
    if not self.config.out_dir:
      return
    paths = canvas.Dump(self.config.out_dir, 'scan%d_%s' % (scan_id, tag))
    with self._lock:
      self.dumped.extend(paths)

  def _WriteLoop(self, conn):
    failed = False
    while True:
      item = conn.results_out.get()
      if item is _STOP:
        return
      if failed:
        continue
      try:
        if isinstance(item, wire.ScanBegin):
          with self._lock:
            if item.scan_id in self._finished:
              self._finished.remove(item.scan_id)
            self.canvases[item.scan_id] = StitchCanvas(
                *self.config.canvas_shape)
          logging.info('Scan %d begins: %d points', item.scan_id,
                       item.n_points)
        elif isinstance(item, wire.ScanEnd):
          canvas = self._Canvas(item.scan_id)
          self._Dump(item.scan_id, canvas, 'final')
          self._Finish(item.scan_id)
          wire.SendMessage(conn.sock, item)
          logging.info('Scan %d done: %d frames stitched', item.scan_id,
                       canvas.frames_stitched)
        else:
          canvas = self._Canvas(item.scan_id)
          canvas.Stitch(item.amplitude, item.phase, item.position)
          wire.SendMessage(conn.sock, item)
          with self._lock:
            self.results_sent += 1
          every = self.config.dump_every
          if every and canvas.frames_stitched % every == 0:
            self._Dump(item.scan_id, canvas, '%06d' % canvas.frames_stitched)
      except (OSError, base.Error) as e:
        logging.error('Result writer failed: %s', e)
        conn.Fail(e)
        failed = True


class EdgeServer(object):
  """TCP front end: a frame listener and a model listener.

  Port 0 binds an ephemeral port; the bound endpoints are available after
  Start().
  """

  def __init__(self, service, frame_endpoint, model_endpoint):
    self.service = service
    self._frames = wire.Listener(frame_endpoint, service.HandleConnection,
                                 name='edge-frames')
    self._models = wire.Listener(model_endpoint,
                                 service.HandleModelConnection,
                                 name='edge-models')

  @property
  def frame_endpoint(self):
    return self._frames.endpoint

  @property
  def model_endpoint(self):
    return self._models.endpoint

  @property
  def errors(self):
    return self._frames.errors + self._models.errors

  def Start(self):
    self._frames.Start()
    self._models.Start()
    return self

  def Stop(self):
    self.service.Stop()
    self._frames.Stop()
    self._models.Stop()


def PushModel(endpoint, model, timeout=30.0):
  """Send model to an edge model endpoint and return its Ack."""
  with socket.create_connection(endpoint, timeout=timeout) as sock:
    wire.SendMessage(sock, wire.ModelMessage.FromModel(model))
    for msg in wire.ReadMessages(sock):
      if isinstance(msg, wire.Ack):
        return msg
  raise base.ServiceError('edge at %s:%d closed without an ACK' % endpoint)
