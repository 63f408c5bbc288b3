#!/usr/bin/env python

"""Continual learning: reconstruct finished scans, validate, retrain, push.

The orchestrator consumes scan-complete events on a single event loop that
owns the workflow state. In ACTIVE mode every scan is reconstructed with
ePIE, cropped into training pairs and appended to the corpus, and the live
model is checked against a fresh slice of those pairs; a phase SSIM gap
above the tolerance queues a retrain, otherwise the workflow suspends. In
SUSPENDED mode scans are skipped until the suspended interval has elapsed
since the last reconstruction.
"""

import collections
import os
import queue
import threading
import time

from absl import logging
import numpy as np

from ptychostream import base
from ptychostream import core
from ptychostream import edge
from ptychostream import epie
from ptychostream import image_io
from ptychostream import simulator
from ptychostream import wire
from ptychostream.surrogate import model as model_lib
from ptychostream.surrogate import serialization
from ptychostream.surrogate import training


ACTIVE = 'ACTIVE'
SUSPENDED = 'SUSPENDED'

COLD_START = 'cold_start'
RETRAIN = 'retrain'
SUSPEND = 'suspend'
SKIPPED = 'skipped'
EPIE_FAILED = 'epie_failed'

REGISTRY_LOG = 'registry.log'
CORPUS_INDEX = 'index.txt'


class OrchestratorConfig(object):
  """Attributes:
    mismatch_tolerance: float in (0, 1), largest phase SSIM gap that counts
      as agreement
    suspended_interval_s: float, seconds between reconstructions while
      suspended
    corpus_dir: str or None, on-disk mirror of the corpus
    corpus_cap: int, pairs kept before FIFO eviction
    validation_fraction: float, share of a new scan's pairs used to validate
    patch_size: int or None, K; default half the frame size
    base_channels: int, width of cold-start models
    train: TrainConfig
    epie: EpieConfig
    epie_workers: int, reconstructions allowed to run at once
    seed: int
  """

  def __init__(self, mismatch_tolerance=0.10, suspended_interval_s=120.0,
               corpus_dir=None, corpus_cap=120000, validation_fraction=0.10,
               patch_size=None, base_channels=model_lib.DEFAULT_BASE_CHANNELS,
               train=None, epie_config=None, epie_workers=1, seed=0):
    if not 0 < mismatch_tolerance < 1:
      raise base.InvalidArgumentError(
          'mismatch_tolerance must be in (0, 1), got %r' % mismatch_tolerance)
    if suspended_interval_s < 0:
      raise base.InvalidArgumentError('suspended_interval_s must be >= 0')
    base.CheckPositive('corpus_cap', corpus_cap)
    base.CheckPositive('epie_workers', epie_workers)
    self.mismatch_tolerance = float(mismatch_tolerance)
    self.suspended_interval_s = float(suspended_interval_s)
    self.corpus_dir = corpus_dir
    self.corpus_cap = int(corpus_cap)
    self.validation_fraction = float(validation_fraction)
    self.patch_size = patch_size
    self.base_channels = int(base_channels)
    self.train = train or training.TrainConfig()
    self.epie = epie_config or epie.EpieConfig()
    self.epie_workers = int(epie_workers)
    self.seed = int(seed)


class RegistryEntry(collections.namedtuple(
    'RegistryEntry', 'version path val_loss corpus_size unix_ms')):

  def ToLine(self):
    return '%d\t%s\t%r\t%d\t%d\n' % self

  @classmethod
  def FromLine(cls, line):
    fields = line.rstrip('\n').split('\t')
    if len(fields) != 5:
      raise base.Error('Malformed registry line %r' % line)
    return cls(int(fields[0]), fields[1], float(fields[2]), int(fields[3]),
               int(fields[4]))


class ModelRegistry(object):
  """Append-only record of every model version.

  With a directory, models are saved as model_v<N>.ptnn next to registry.log
  and the log is replayed on construction. Without one, models are only kept
  in memory.
  """

  def __init__(self, directory=None, clock=time.time):
    self.directory = directory
    self._clock = clock
    self._entries = []
    self._models = {}
    self._lock = threading.Lock()
    if directory:
      base.MakeDir(directory)
      log = os.path.join(directory, REGISTRY_LOG)
      if os.path.exists(log):
        with open(log) as f:
          self._entries = [RegistryEntry.FromLine(l) for l in f if l.strip()]
        logging.info('Recovered %d registry entries from %s',
                     len(self._entries), log)

  def Entries(self):
    with self._lock:
      return list(self._entries)

  def Current(self):
    """The newest entry, or None."""
    with self._lock:
      return self._entries[-1] if self._entries else None

  @property
  def current_version(self):
    entry = self.Current()
    return entry.version if entry else 0

  def Register(self, model, corpus_size):
    """Record model as the newest version.

    Raises:
      InvalidArgumentError: if model.version does not exceed the current one.
    """
    with self._lock:
      if self._entries and model.version <= self._entries[-1].version:
        raise base.InvalidArgumentError(
            'model v%d is not newer than registered v%d' %
            (model.version, self._entries[-1].version))
      path = ''
      if self.directory:
        path = serialization.SaveModel(
            model, os.path.join(self.directory,
                                'model_v%d.ptnn' % model.version))
      val_loss = model.val_loss if model.val_loss is not None else float('nan')
      entry = RegistryEntry(model.version, path, float(val_loss),
                            int(corpus_size), int(self._clock() * 1000))
      if self.directory:
        with open(os.path.join(self.directory, REGISTRY_LOG), 'a') as f:
          f.write(entry.ToLine())
      self._entries.append(entry)
      self._models[model.version] = model
    logging.info('Registered model v%d (corpus %d, val loss %.5f)',
                 model.version, corpus_size, val_loss)
    return entry

  def Load(self, version):
    with self._lock:
      model = self._models.get(version)
      entry = next((e for e in self._entries if e.version == version), None)
    if model is not None:
      return model
    if entry is None or not entry.path:
      raise base.InvalidArgumentError('no registered model v%d' % version)
    model = serialization.LoadModel(entry.path)
    model.trained_on_pairs = entry.corpus_size
    model.val_loss = entry.val_loss
    with self._lock:
      self._models[version] = model
    return model

  def CurrentModel(self):
    entry = self.Current()
    return self.Load(entry.version) if entry else None


class TrainingCorpus(object):
  """FIFO-capped list of training pairs, optionally mirrored on disk.

  The mirror keeps one capture file and two PGM+range labels per pair and an
  index file rewritten atomically after every change.
  """

  def __init__(self, cap, directory=None):
    base.CheckPositive('cap', cap)
    self.cap = int(cap)
    self.directory = directory
    self._pairs = collections.deque()
    self._next_id = 0
    self._lock = threading.Lock()
    if directory:
      base.MakeDir(directory)
      self._Recover()

  def __len__(self):
    with self._lock:
      return len(self._pairs)

  def Pairs(self):
    with self._lock:
      return [p for _, p in self._pairs]

  def Add(self, pairs):
    """Append pairs, evicting the oldest beyond the cap."""
    with self._lock:
      for pair in pairs:
        pid = self._next_id
        self._next_id += 1
        if self.directory:
          self._WritePair(pid, pair)
        self._pairs.append((pid, pair))
      evicted = []
      while len(self._pairs) > self.cap:
        evicted.append(self._pairs.popleft()[0])
      if self.directory:
        self._WriteIndex()
        for pid in evicted:
          self._RemovePair(pid)
      size = len(self._pairs)
    if evicted:
      logging.info('Corpus evicted %d oldest pairs', len(evicted))
    return size

  def _Paths(self, pid):
    stem = os.path.join(self.directory, 'pair_%08d' % pid)
    return stem + '.frame', stem + '_amplitude.pgm', stem + '_phase.pgm'

  def _WritePair(self, pid, pair):
    frame_path, amp_path, phase_path = self._Paths(pid)
    simulator.WriteCapture(frame_path, [pair.frame])
    image_io.WriteImage(amp_path, pair.amplitude)
    image_io.WriteImage(phase_path, pair.phase)

  def _RemovePair(self, pid):
    frame_path, amp_path, phase_path = self._Paths(pid)
    for p in (frame_path, amp_path, image_io.RangePath(amp_path), phase_path,
              image_io.RangePath(phase_path)):
      try:
        os.remove(p)
      except OSError:
        pass

  def _WriteIndex(self):
    index = os.path.join(self.directory, CORPUS_INDEX)
    tmp = index + '.tmp'
    with open(tmp, 'w') as f:
      for pid, _ in self._pairs:
        f.write('%d\n' % pid)
    os.replace(tmp, index)

  def _Recover(self):
    index = os.path.join(self.directory, CORPUS_INDEX)
    if not os.path.exists(index):
      return
    with open(index) as f:
      ids = [int(l) for l in f if l.strip()]
    for pid in ids:
      frame_path, amp_path, phase_path = self._Paths(pid)
      frames = simulator.ReadCapture(frame_path)
      pair = epie.TrainingPair(frames[0], image_io.ReadImage(amp_path),
                               image_io.ReadImage(phase_path))
      self._pairs.append((pid, pair))
    self._next_id = ids[-1] + 1 if ids else 0
    logging.info('Recovered %d corpus pairs from %s', len(ids), self.directory)


def ValidateModel(model, pairs, scale_factor=1.0):
  """1 - mean phase SSIM of model's inferences against pair labels."""
  if not pairs:
    raise base.InvalidArgumentError('no validation pairs')
  _, phase = model_lib.Infer(model, [p.frame for p in pairs], scale_factor)
  scores = [core.PhaseScore(phase[i], p.phase) for i, p in enumerate(pairs)]
  return 1.0 - float(np.mean(scores))


def ValidationSubset(pairs, fraction, rng):
  """A random subset of at least one pair, in original order."""
  n = max(1, int(round(len(pairs) * fraction)))
  idx = np.sort(rng.choice(len(pairs), size=min(n, len(pairs)), replace=False))
  return [pairs[i] for i in idx]


class RetrainScheduler(object):
  """Runs job() on a worker, one at a time, coalescing triggers.

  A trigger while a job runs sets a pending flag; when the job finishes a
  single follow-up run consumes every trigger that arrived meanwhile.
  """

  def __init__(self, job):
    self._job = job
    self._cond = threading.Condition()
    self._running = False
    self._pending = False
    self.runs = 0
    self.errors = []

  def Trigger(self):
    with self._cond:
      if self._running:
        self._pending = True
        return False
      self._running = True
    t = threading.Thread(target=self._Work, name='retrain')
    t.daemon = True
    t.start()
    return True

  def _Work(self):
    while True:
      try:
        self._job()
      except Exception as e:  # pylint: disable=broad-except
        logging.exception('Retrain job failed')
        self.errors.append(e)
      with self._cond:
        self.runs += 1
        if self._pending:
          self._pending = False
          continue
        self._running = False
        self._cond.notify_all()
        return

  @property
  def busy(self):
    with self._cond:
      return self._running

  def WaitForIdle(self, timeout=None):
    """True once no job is running or pending."""
    with self._cond:
      return self._cond.wait_for(lambda: not self._running, timeout)


class ModelPusher(object):
  """Pushes models to an edge, retrying with capped exponential backoff."""

  def __init__(self, endpoint, base_delay_s=1.0, max_delay_s=60.0,
               max_attempts=10, sleep=time.sleep, push=edge.PushModel):
    self.endpoint = endpoint
    self.base_delay_s = base_delay_s
    self.max_delay_s = max_delay_s
    self.max_attempts = max_attempts
    self._sleep = sleep
    self._push = push
    self.pushed = []

  def Delay(self, attempt):
    """Backoff before retry number attempt (0-based)."""
    return min(self.max_delay_s, self.base_delay_s * 2 ** attempt)

  def Push(self, model):
    """Returns the edge's Ack, or None after max_attempts failures."""
    for attempt in range(self.max_attempts):
      try:
        ack = self._push(self.endpoint, model)
      except (OSError, base.Error) as e:
        delay = self.Delay(attempt)
        logging.warning('Push of v%d failed (%s); retrying in %.1fs',
                        model.version, e, delay)
        self._sleep(delay)
        continue
      if ack.accepted:
        self.pushed.append(model.version)
        logging.info('Edge acknowledged model v%d', ack.model_version)
      else:
        logging.warning('Edge rejected model v%d: %s', model.version,
                        ack.reason)
      return ack
    logging.error('Giving up pushing model v%d after %d attempts',
                  model.version, self.max_attempts)
    return None


class ActionRecord(collections.namedtuple(
    'ActionRecord', 'scan_id gap action mode model_version')):
  """What the orchestrator did with one scan; gap is None when not validated."""


class WorkflowState(object):

  def __init__(self):
    self.mode = ACTIVE
    self.last_reconstruction = None
    self.log = []


class _PendingScan(object):
  """A finished scan whose reconstruction was handed to the ePIE runner.

  job is None when the suspended interval skipped the scan.
  """

  def __init__(self, frames, plan, job, started):
    self.frames = frames
    self.plan = plan
    self.job = job
    self.started = started


class Orchestrator(object):
  """The online-training controller.

  The event loop only submits reconstructions to an EpieJobRunner; a decision
  thread applies their results in arrival order, so scan events and retrain
  triggers keep flowing while ePIE runs.

  Args:
    config: OrchestratorConfig
    probe: ComplexField used to initialize ePIE
    object_shape: (height, width) of the reconstruction grid
    registry: ModelRegistry
    corpus: TrainingCorpus
    pusher: ModelPusher or None
    clock: monotonic time source for the suspended interval
  """

  def __init__(self, config, probe, object_shape, registry=None, corpus=None,
               pusher=None, clock=time.monotonic):
    self.config = config
    self.probe = probe
    self.object_shape = tuple(object_shape)
    self.registry = registry or ModelRegistry()
    self.corpus = corpus or TrainingCorpus(config.corpus_cap,
                                           config.corpus_dir)
    self.pusher = pusher
    self.state = WorkflowState()
    self.scheduler = RetrainScheduler(self._RetrainAndPush)
    self.runner = epie.EpieJobRunner(max_workers=config.epie_workers)
    self.reconstructions = {}
    self._clock = clock
    self._rng = np.random.default_rng(config.seed)
    self._lock = threading.Lock()
    self._events = queue.Queue()
    self._decisions = queue.Queue()
    self._loop = None
    self._decider = None

  @property
  def patch_size(self):
    return self.config.patch_size or self.probe.shape[0] // 2

  def _Skip(self, now):
    with self._lock:
      return (self.state.mode == SUSPENDED and
              now - self.state.last_reconstruction <
              self.config.suspended_interval_s)

  def BeginScan(self, frames, plan):
    """Submit a finished scan's reconstruction; returns a _PendingScan."""
    now = self._clock()
    if self._Skip(now):
      return _PendingScan(frames, plan, None, now)
    job = self.runner.Submit(frames, plan, self.probe,
                             np.ones(self.object_shape, complex),
                             self.config.epie)
    return _PendingScan(frames, plan, job, now)

  def FinishScan(self, pending):
    """Wait for a scan's reconstruction and act on it; returns its ActionRecord.

    A scan submitted before an earlier one suspended the workflow is skipped
    here, as if the two had been handled one after the other.
    """
    frames, plan = pending.frames, pending.plan
    current = self.registry.CurrentModel()
    version = current.version if current else 0
    if pending.job is None or self._Skip(pending.started):
      return self._Log(plan.scan_id, None, SKIPPED, version)

    try:
      recon = pending.job.Result()
      recon = epie.RemovePhaseOffset(
          recon, epie.IlluminationMask(recon.probe, plan, self.object_shape))
      pairs = epie.CropTrainingPairs(recon, plan, frames, self.patch_size)
    except base.Error as e:
      logging.error('Reconstruction of scan %d failed: %s', plan.scan_id, e)
      return self._Log(plan.scan_id, None, EPIE_FAILED, version)
    with self._lock:
      self.state.last_reconstruction = pending.started
    self.reconstructions[plan.scan_id] = recon

    if current is None:
      self.corpus.Add(pairs)
      self._SetMode(ACTIVE)
      self.scheduler.Trigger()
      return self._Log(plan.scan_id, None, COLD_START, version)

    held_out = ValidationSubset(pairs, self.config.validation_fraction,
                                self._rng)
    gap = ValidateModel(current, held_out, self.config.train.scale_factor)
    self.corpus.Add(pairs)
    if gap > self.config.mismatch_tolerance:
      self._SetMode(ACTIVE)
      self.scheduler.Trigger()
      return self._Log(plan.scan_id, gap, RETRAIN, version)
    self._SetMode(SUSPENDED)
    return self._Log(plan.scan_id, gap, SUSPEND, version)

  def OnScanComplete(self, frames, plan):
    """Handle one finished scan to completion; returns its ActionRecord."""
    return self.FinishScan(self.BeginScan(frames, plan))

  def _SetMode(self, mode):
    with self._lock:
      self.state.mode = mode

  def _Log(self, scan_id, gap, action, version):
    record = ActionRecord(scan_id, gap, action, self.state.mode, version)
    self.state.log.append(record)
    logging.info('Scan %d: %s (gap %s, mode %s)', scan_id, action,
                 'n/a' if gap is None else '%.3f' % gap, self.state.mode)
    return record

  def _RetrainAndPush(self):
    pairs = self.corpus.Pairs()
    if len(pairs) < training.MIN_PAIRS:
      logging.warning('Corpus has %d pairs; not retraining', len(pairs))
      return
    current = self.registry.CurrentModel()
    if current is None:
      frame_size = pairs[0].frame.size
      current = model_lib.BuildModel(frame_size, self.patch_size,
                                     self.config.base_channels,
                                     seed=self.config.seed)
    try:
      best, _ = training.Train(current, pairs, self.config.train)
    except training.TrainingDivergedError as e:
      logging.error('Retraining diverged: %s; registry unchanged', e)
      return
    self.registry.Register(best, len(pairs))
    if self.pusher is not None:
      self.pusher.Push(best)

  def WaitForIdle(self, timeout=None):
    """Block until queued scans are handled and no retrain is running."""
    self._events.join()
    self._decisions.join()
    return self.scheduler.WaitForIdle(timeout)

  def Submit(self, frames, plan):
    """Queue a scan-complete event for the event loop."""
    self._events.put((frames, plan))

  def Start(self):
    self._decider = threading.Thread(target=self._Decide,
                                     name='orchestrator-decide')
    self._decider.daemon = True
    self._decider.start()
    self._loop = threading.Thread(target=self._Run, name='orchestrator')
    self._loop.daemon = True
    self._loop.start()
    return self

  def _Run(self):
    while True:
      event = self._events.get()
      try:
        if event is None:
          self._decisions.put(None)
          return
        self._decisions.put(self.BeginScan(*event))
      except Exception:  # pylint: disable=broad-except
        logging.exception('Scan event failed')
      finally:
        self._events.task_done()

  def _Decide(self):
    while True:
      pending = self._decisions.get()
      try:
        if pending is None:
          return
        self.FinishScan(pending)
      except Exception:  # pylint: disable=broad-except
        logging.exception('Scan decision failed')
      finally:
        self._decisions.task_done()

  def Stop(self):
    if self._loop is not None:
      self._events.put(None)
      self._loop.join()
      self._decider.join()
      self._loop = None
      self._decider = None
    self.runner.Shutdown()


class ScanCollector(object):
  """Assembles wire messages into complete scans."""

  def __init__(self):
    self._frames = collections.defaultdict(list)
    self._begins = {}

  def Feed(self, msg):
    """Returns (frames, plan) when msg completes a scan, else None."""
    if isinstance(msg, wire.ScanBegin):
      self._begins[msg.scan_id] = msg
      self._frames[msg.scan_id] = []
    elif isinstance(msg, wire.FrameMessage):
      self._frames[msg.frame.scan_id].append(msg.frame)
    elif isinstance(msg, wire.ScanEnd):
      frames = sorted(self._frames.pop(msg.scan_id, []),
                      key=lambda f: f.frame_index)
      begin = self._begins.pop(msg.scan_id, None)
      if begin is not None and begin.n_points != len(frames):
        logging.warning('Scan %d announced %d points, received %d',
                        msg.scan_id, begin.n_points, len(frames))
      if not frames:
        return None
      return frames, PlanFromFrames(msg.scan_id, frames)
    return None


def PlanFromFrames(scan_id, frames):
  positions = np.array([f.position for f in frames])
  step = 0.0
  if len(frames) > 1:
    step, _ = core.MeanNearestNeighborSpacing(positions)
  return simulator.ScanPlan(scan_id, positions, step)


class FrameIngestServer(object):
  """Listens for scan streams and reports each completed scan."""

  def __init__(self, endpoint, on_scan):
    self._on_scan = on_scan
    self._listener = wire.Listener(endpoint, self._Handle, name='ingest')

  @property
  def endpoint(self):
    return self._listener.endpoint

  def _Handle(self, sock):
    collector = ScanCollector()
    for msg in wire.ReadMessages(sock):
      scan = collector.Feed(msg)
      if scan is not None:
        self._on_scan(*scan)
        wire.SendMessage(sock, wire.ScanEnd(scan[1].scan_id))

  def Start(self):
    self._listener.Start()
    return self

  def Stop(self):
    self._listener.Stop()


class ProbeSet(object):
  """A named group of labeled pairs from one test-sample area."""

  def __init__(self, name, pairs):
    self.name = name
    self.pairs = list(pairs)


def PhaseMse(model, pairs, scale_factor=1.0):
  """Mean phase MSE over pairs after global offset alignment."""
  _, phase = model_lib.Infer(model, [p.frame for p in pairs], scale_factor)
  errors = [core.Mse(core.AlignPhaseImage(phase[i], p.phase), p.phase)
            for i, p in enumerate(pairs)]
  return float(np.mean(errors))


def LearningCurve(registry, probe_sets, scale_factor=1.0):
  """One row per registered model: [version, corpus_size, mse per set].

  Rows are ordered by corpus size, then version.
  """
  entries = registry.Entries()
  if not entries:
    raise base.EmptyReportError('no registered models')
  rows = []
  for entry in sorted(entries, key=lambda e: (e.corpus_size, e.version)):
    model = registry.Load(entry.version)
    rows.append([entry.version, entry.corpus_size] +
                [PhaseMse(model, s.pairs, scale_factor) for s in probe_sets])
  return rows


def WriteLearningCurve(path, probe_sets, rows):
  header = ['version', 'corpus_size'] + ['mse_' + s.name for s in probe_sets]
  return image_io.WriteCsv(path, header, rows)
