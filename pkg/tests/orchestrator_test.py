#!/usr/bin/env python

"""Tests for ptychostream.orchestrator."""

import os
import socket
import threading

from absl.testing import absltest
from mox3 import stubout
import numpy as np

from ptychostream import base
from ptychostream import core
from ptychostream import epie
from ptychostream import orchestrator
from ptychostream import simulator
from ptychostream import wire
from ptychostream.surrogate import model as model_lib
from ptychostream.surrogate import training
from tests import test_util


class FakeClock(object):

  def __init__(self):
    self.now = 1000.0

  def __call__(self):
    return self.now


class FakeScheduler(object):

  def __init__(self):
    self.triggers = 0

  def Trigger(self):
    self.triggers += 1
    return True

  def WaitForIdle(self, timeout=None):
    return True


class ModelRegistryTest(absltest.TestCase):

  def testInMemory(self):
    registry = orchestrator.ModelRegistry(clock=lambda: 12.5)
    self.assertIsNone(registry.CurrentModel())
    self.assertEqual(0, registry.current_version)
    model = test_util.TinyModel().Clone(version=1)
    entry = registry.Register(model, corpus_size=40)
    self.assertEqual((1, '', 40, 12500), (entry.version, entry.path,
                                          entry.corpus_size, entry.unix_ms))
    self.assertIs(model, registry.CurrentModel())
    self.assertRaises(base.InvalidArgumentError, registry.Register,
                      model.Clone(), 50)
    self.assertRaises(base.InvalidArgumentError, registry.Load, 7)

  def testPersistence(self):
    directory = os.path.join(self.create_tempdir().full_path, 'registry')
    registry = orchestrator.ModelRegistry(directory)
    v1 = test_util.TinyModel(seed=1).Clone(version=1)
    v1.val_loss = 0.25
    v3 = test_util.TinyModel(seed=3).Clone(version=3)
    v3.val_loss = 0.5
    registry.Register(v1, 30)
    registry.Register(v3, 60)
    self.assertTrue(os.path.exists(os.path.join(directory, 'model_v3.ptnn')))

    reopened = orchestrator.ModelRegistry(directory)
    self.assertEqual(registry.Entries(), reopened.Entries())
    self.assertEqual(3, reopened.current_version)
    loaded = reopened.Load(1)
    self.assertEqual(v1, loaded)
    self.assertEqual(0.25, loaded.val_loss)
    self.assertEqual(30, loaded.trained_on_pairs)
    self.assertEqual(v3, reopened.CurrentModel())

  def testEntryLine(self):
    entry = orchestrator.RegistryEntry(2, '/m/v2.ptnn', 0.1, 9, 123)
    self.assertEqual(entry,
                     orchestrator.RegistryEntry.FromLine(entry.ToLine()))
    self.assertRaises(base.Error, orchestrator.RegistryEntry.FromLine, 'x\ty')


class TrainingCorpusTest(absltest.TestCase):

  def testCap(self):
    corpus = orchestrator.TrainingCorpus(5)
    pairs = test_util.RandomPairs(7)
    self.assertEqual(3, corpus.Add(pairs[:3]))
    self.assertEqual(5, corpus.Add(pairs[3:]))
    self.assertEqual(pairs[2:], corpus.Pairs())

  def testRecovery(self):
    directory = self.create_tempdir().full_path
    corpus = orchestrator.TrainingCorpus(4, directory)
    pairs = test_util.RandomPairs(6)
    corpus.Add(pairs)
    self.assertFalse(os.path.exists(
        os.path.join(directory, 'pair_00000000.frame')))
    recovered = orchestrator.TrainingCorpus(4, directory)
    self.assertLen(recovered, 4)
    for got, want in zip(recovered.Pairs(), pairs[2:]):
      self.assertEqual(want.frame, got.frame)
      np.testing.assert_allclose(want.phase, got.phase, atol=1e-4)
    recovered.Add(test_util.RandomPairs(1, seed=9))
    self.assertTrue(os.path.exists(
        os.path.join(directory, 'pair_00000006.frame')))

  def testBadCap(self):
    self.assertRaises(base.InvalidArgumentError, orchestrator.TrainingCorpus,
                      0)


class ValidationTest(absltest.TestCase):

  def testSelfAgreement(self):
    model = test_util.TinyModel()
    pairs = test_util.RandomPairs(4)
    _, phase = model_lib.Infer(model, [p.frame for p in pairs])
    labeled = [epie.TrainingPair(p.frame, p.amplitude, phase[i])
               for i, p in enumerate(pairs)]
    self.assertAlmostEqual(0.0, orchestrator.ValidateModel(model, labeled),
                           places=5)
    self.assertGreater(orchestrator.ValidateModel(model, pairs), 0.01)
    self.assertRaises(base.InvalidArgumentError, orchestrator.ValidateModel,
                      model, [])

  def testSubset(self):
    pairs = test_util.RandomPairs(30)
    subset = orchestrator.ValidationSubset(pairs, 0.1,
                                           np.random.default_rng(0))
    self.assertLen(subset, 3)
    idx = [pairs.index(p) for p in subset]
    self.assertEqual(sorted(idx), idx)
    self.assertLen(orchestrator.ValidationSubset(
        pairs[:2], 0.1, np.random.default_rng(0)), 1)


class RetrainSchedulerTest(absltest.TestCase):

  def testCoalesces(self):
    started = threading.Event()
    release = threading.Event()

    def Job():
      started.set()
      release.wait(10)

    scheduler = orchestrator.RetrainScheduler(Job)
    self.assertTrue(scheduler.Trigger())
    self.assertTrue(started.wait(10))
    self.assertFalse(scheduler.Trigger())
    self.assertFalse(scheduler.Trigger())
    self.assertTrue(scheduler.busy)
    release.set()
    self.assertTrue(scheduler.WaitForIdle(10))
    self.assertEqual(2, scheduler.runs)

  def testJobErrorsAreKept(self):
    def Job():
      raise base.Error('boom')

    scheduler = orchestrator.RetrainScheduler(Job)
    scheduler.Trigger()
    self.assertTrue(scheduler.WaitForIdle(10))
    self.assertLen(scheduler.errors, 1)
    self.assertFalse(scheduler.busy)


class ModelPusherTest(absltest.TestCase):

  def setUp(self):
    self.sleeps = []
    self.model = test_util.TinyModel().Clone(version=2)

  def _Pusher(self, outcomes, max_attempts=10):
    outcomes = list(outcomes)

    def Push(endpoint, model):
      outcome = outcomes.pop(0)
      if isinstance(outcome, Exception):
        raise outcome
      return outcome

    return orchestrator.ModelPusher(('h', 1), base_delay_s=1.0,
                                    max_delay_s=3.0,
                                    max_attempts=max_attempts,
                                    sleep=self.sleeps.append, push=Push)

  def testRetries(self):
    pusher = self._Pusher([OSError('refused'), base.ServiceError('no ack'),
                           OSError('refused'), wire.Ack(2)])
    self.assertTrue(pusher.Push(self.model).accepted)
    self.assertEqual([1.0, 2.0, 3.0], self.sleeps)
    self.assertEqual([2], pusher.pushed)

  def testRejected(self):
    pusher = self._Pusher([wire.Ack(2, wire.ACK_STALE, 'old')])
    self.assertEqual(wire.ACK_STALE, pusher.Push(self.model).status)
    self.assertEqual([], pusher.pushed)

  def testGivesUp(self):
    pusher = self._Pusher([OSError('x')] * 3, max_attempts=3)
    self.assertIsNone(pusher.Push(self.model))
    self.assertLen(self.sleeps, 3)


class OnScanCompleteTest(absltest.TestCase):

  def setUp(self):
    self.stubs = stubout.StubOutForTesting()
    self.obj, self.probe, self.plan, self.frames = test_util.TinyScene(
        n_points=20)
    self.epie_calls = []
    self.gap = 0.5
    self.stubs.Set(epie, 'EpieReconstruct', self._FakeReconstruct)
    self.stubs.Set(orchestrator, 'ValidateModel',
                   lambda model, pairs, scale_factor: self.gap)
    self.clock = FakeClock()
    config = orchestrator.OrchestratorConfig(
        mismatch_tolerance=0.1, suspended_interval_s=60.0, patch_size=8)
    self.orch = orchestrator.Orchestrator(config, self.probe, (64, 64),
                                          clock=self.clock)
    self.orch.scheduler = FakeScheduler()

  def tearDown(self):
    self.orch.runner.Shutdown()
    self.stubs.UnsetAll()

  def _FakeReconstruct(self, frames, plan, probe, obj, config):
    self.epie_calls.append(plan.scan_id)
    return epie.Reconstruction(self.obj.field, probe, [0.1], plan.scan_id)

  def _Scan(self, scan_id):
    plan = simulator.ScanPlan(scan_id, self.plan.positions,
                              self.plan.step_size)
    return self.frames, plan

  def _RegisterModel(self):
    self.orch.registry.Register(test_util.TinyModel().Clone(version=1), 20)

  def testColdStart(self):
    record = self.orch.OnScanComplete(*self._Scan(1))
    self.assertEqual(orchestrator.COLD_START, record.action)
    self.assertIsNone(record.gap)
    self.assertEqual(orchestrator.ACTIVE, record.mode)
    self.assertEqual(0, record.model_version)
    self.assertLen(self.orch.corpus, 20)
    self.assertEqual(1, self.orch.scheduler.triggers)
    self.assertIn(1, self.orch.reconstructions)

  def testRetrain(self):
    self._RegisterModel()
    record = self.orch.OnScanComplete(*self._Scan(2))
    self.assertEqual(orchestrator.RETRAIN, record.action)
    self.assertEqual(0.5, record.gap)
    self.assertEqual(1, record.model_version)
    self.assertEqual(1, self.orch.scheduler.triggers)
    self.assertLen(self.orch.corpus, 20)

  def testSuspendSkipAndResume(self):
    self._RegisterModel()
    self.gap = 0.05
    record = self.orch.OnScanComplete(*self._Scan(1))
    self.assertEqual(orchestrator.SUSPEND, record.action)
    self.assertEqual(orchestrator.SUSPENDED, self.orch.state.mode)
    self.assertEqual(0, self.orch.scheduler.triggers)

    self.clock.now += 30
    record = self.orch.OnScanComplete(*self._Scan(2))
    self.assertEqual(orchestrator.SKIPPED, record.action)
    self.assertEqual([1], self.epie_calls)
    self.assertLen(self.orch.corpus, 20)

    self.clock.now += 31
    self.gap = 0.3
    record = self.orch.OnScanComplete(*self._Scan(3))
    self.assertEqual(orchestrator.RETRAIN, record.action)
    self.assertEqual(orchestrator.ACTIVE, self.orch.state.mode)
    self.assertEqual([1, 3], self.epie_calls)
    self.assertEqual([1, 2, 3], [r.scan_id for r in self.orch.state.log])

  def testEpieFailure(self):
    def Fail(*args):
      raise epie.EpieError('diverged')

    self.stubs.Set(epie, 'EpieReconstruct', Fail)
    record = self.orch.OnScanComplete(*self._Scan(4))
    self.assertEqual(orchestrator.EPIE_FAILED, record.action)
    self.assertLen(self.orch.corpus, 0)
    self.assertIsNone(self.orch.state.last_reconstruction)
    self.assertEqual(0, self.orch.scheduler.triggers)

  def testStaleSubmissionSkippedAfterSuspend(self):
    self._RegisterModel()
    self.gap = 0.05
    first = self.orch.BeginScan(*self._Scan(1))
    second = self.orch.BeginScan(*self._Scan(2))
    self.assertEqual(orchestrator.SUSPEND,
                     self.orch.FinishScan(first).action)
    self.assertEqual(orchestrator.SKIPPED,
                     self.orch.FinishScan(second).action)
    self.assertNotIn(2, self.orch.reconstructions)

  def testReconstructionRunsOnRunner(self):
    threads = []

    def Reconstruct(frames, plan, probe, obj, config):
      threads.append(threading.current_thread().name)
      return self._FakeReconstruct(frames, plan, probe, obj, config)

    self.stubs.Set(epie, 'EpieReconstruct', Reconstruct)
    self.orch.OnScanComplete(*self._Scan(1))
    self.assertLen(threads, 1)
    self.assertTrue(threads[0].startswith('epie'), threads[0])


class EventLoopTest(absltest.TestCase):

  def setUp(self):
    self.stubs = stubout.StubOutForTesting()
    self.obj, self.probe, self.plan, self.frames = test_util.TinyScene(
        n_points=20)
    self.release = threading.Event()
    self.started = threading.Event()
    self.stubs.Set(epie, 'EpieReconstruct', self._SlowReconstruct)
    config = orchestrator.OrchestratorConfig(patch_size=8)
    self.orch = orchestrator.Orchestrator(config, self.probe, (64, 64))
    self.orch.scheduler = FakeScheduler()

  def tearDown(self):
    self.release.set()
    self.orch.Stop()
    self.stubs.UnsetAll()

  def _SlowReconstruct(self, frames, plan, probe, obj, config):
    self.started.set()
    self.release.wait(30)
    return epie.Reconstruction(self.obj.field, probe, [0.1], plan.scan_id)

  def testEventsFlowWhileReconstructing(self):
    self.orch.Start()
    for scan_id in (1, 2, 3):
      self.orch.Submit(self.frames, simulator.ScanPlan(
          scan_id, self.plan.positions, self.plan.step_size))
    self.assertTrue(self.started.wait(30))
    drained = threading.Thread(target=self.orch._events.join)
    drained.daemon = True
    drained.start()
    drained.join(10)
    self.assertFalse(drained.is_alive())
    self.assertEqual([], self.orch.state.log)

    self.release.set()
    self.assertTrue(self.orch.WaitForIdle(60))
    self.assertEqual([1, 2, 3], [r.scan_id for r in self.orch.state.log])
    self.assertEqual(orchestrator.COLD_START, self.orch.state.log[0].action)
    self.assertEqual(3, self.orch.scheduler.triggers)



class RetrainTest(absltest.TestCase):

  def _Config(self, **kwargs):
    return orchestrator.OrchestratorConfig(
        patch_size=8, base_channels=2,
        train=training.TrainConfig(epochs=1, batch_size=8),
        epie_config=epie.EpieConfig(n_iterations=2), **kwargs)

  def testEventLoopTrainsAndPushes(self):
    pushed = []

    def Push(endpoint, model):
      pushed.append(model.version)
      return wire.Ack(model.version)

    pusher = orchestrator.ModelPusher(('h', 1), push=Push)
    orch = orchestrator.Orchestrator(self._Config(), test_util.TinyProbe(),
                                     (64, 64), pusher=pusher).Start()
    try:
      _, _, plan, frames = test_util.TinyScene(n_points=20, scan_id=5)
      orch.Submit(frames, plan)
      self.assertTrue(orch.WaitForIdle(120))
    finally:
      orch.Stop()
    self.assertEqual(1, orch.registry.current_version)
    self.assertEqual(20, orch.registry.Current().corpus_size)
    self.assertEqual([1], pushed)
    self.assertEqual([orchestrator.COLD_START],
                     [r.action for r in orch.state.log])

  def testTooFewPairs(self):
    orch = orchestrator.Orchestrator(self._Config(), test_util.TinyProbe(),
                                     (64, 64))
    orch.corpus.Add(test_util.RandomPairs(training.MIN_PAIRS - 1))
    orch._RetrainAndPush()
    self.assertIsNone(orch.registry.Current())

  def testContinuesFromCurrentModel(self):
    orch = orchestrator.Orchestrator(self._Config(), test_util.TinyProbe(),
                                     (64, 64))
    orch.registry.Register(test_util.TinyModel().Clone(version=4), 0)
    orch.corpus.Add(test_util.RandomPairs(12))
    orch._RetrainAndPush()
    self.assertEqual(5, orch.registry.current_version)
    self.assertEqual(12, orch.registry.CurrentModel().trained_on_pairs)


class ScanCollectorTest(absltest.TestCase):

  def testAssemble(self):
    _, _, plan, frames = test_util.TinyScene(n_points=6, scan_id=3)
    collector = orchestrator.ScanCollector()
    self.assertIsNone(collector.Feed(wire.ScanBegin(3, 6, 16, 8)))
    for f in reversed(frames):
      self.assertIsNone(collector.Feed(wire.FrameMessage(f)))
    self.assertIsNone(collector.Feed(wire.Heartbeat()))
    got, got_plan = collector.Feed(wire.ScanEnd(3))
    self.assertEqual(frames, got)
    self.assertEqual(3, got_plan.scan_id)
    np.testing.assert_array_equal(plan.positions, got_plan.positions)
    mean, _ = core.MeanNearestNeighborSpacing(plan.positions)
    self.assertAlmostEqual(mean, got_plan.step_size)

  def testEmptyScan(self):
    collector = orchestrator.ScanCollector()
    collector.Feed(wire.ScanBegin(1, 5, 16, 8))
    self.assertIsNone(collector.Feed(wire.ScanEnd(1)))

  def testSinglePointPlan(self):
    _, _, _, frames = test_util.TinyScene(n_points=1)
    plan = orchestrator.PlanFromFrames(0, frames)
    self.assertEqual(1, plan.n_points)
    self.assertEqual(0.0, plan.step_size)


class FrameIngestServerTest(absltest.TestCase):

  def testIngest(self):
    scans = []
    server = orchestrator.FrameIngestServer(
        ('127.0.0.1', 0), lambda frames, plan: scans.append((frames, plan)))
    server.Start()
    try:
      _, _, _, frames = test_util.TinyScene(n_points=4, scan_id=2)
      sock = socket.create_connection(server.endpoint)
      wire.SendMessage(sock, wire.ScanBegin(2, 4, 16, 8))
      for f in frames:
        wire.SendMessage(sock, wire.FrameMessage(f))
      wire.SendMessage(sock, wire.ScanEnd(2))
      sock.shutdown(socket.SHUT_WR)
      self.assertEqual([wire.ScanEnd(2)], list(wire.ReadMessages(sock)))
      sock.close()
    finally:
      server.Stop()
    self.assertLen(scans, 1)
    self.assertEqual(frames, scans[0][0])


class LearningCurveTest(absltest.TestCase):

  def testRows(self):
    registry = orchestrator.ModelRegistry()
    registry.Register(test_util.TinyModel(seed=1).Clone(version=1), 50)
    registry.Register(test_util.TinyModel(seed=2).Clone(version=2), 20)
    sets = [orchestrator.ProbeSet('seen', test_util.RandomPairs(3)),
            orchestrator.ProbeSet('unseen', test_util.RandomPairs(3, seed=1))]
    rows = orchestrator.LearningCurve(registry, sets)
    self.assertEqual([[2, 20], [1, 50]], [r[:2] for r in rows])
    self.assertTrue(all(len(r) == 4 and r[2] >= 0 for r in rows))
    path = os.path.join(self.create_tempdir().full_path, 'curve.csv')
    orchestrator.WriteLearningCurve(path, sets, rows)
    with open(path) as f:
      self.assertEqual('version,corpus_size,mse_seen,mse_unseen',
                       f.readline().strip())

  def testPhaseMseIgnoresOffset(self):
    model = test_util.TinyModel()
    pairs = test_util.RandomPairs(2)
    _, phase = model_lib.Infer(model, [p.frame for p in pairs])
    shifted = [epie.TrainingPair(p.frame, p.amplitude, phase[i] + 0.7)
               for i, p in enumerate(pairs)]
    self.assertAlmostEqual(0.0, orchestrator.PhaseMse(model, shifted),
                           places=8)

  def testEmpty(self):
    self.assertRaises(base.EmptyReportError, orchestrator.LearningCurve,
                      orchestrator.ModelRegistry(), [])


if __name__ == '__main__':
  absltest.main()
