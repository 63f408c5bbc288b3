#!/usr/bin/env python

"""Tests for ptychostream.edge."""

import os
import queue
import socket
import struct
import threading

from absl.testing import absltest
from absl.testing import parameterized
import numpy as np

from ptychostream import base
from ptychostream import edge
from ptychostream import wire
from ptychostream.surrogate import layers
from ptychostream.surrogate import model as model_lib
from ptychostream.surrogate import serialization
from tests import test_util


def _Queued(n):
  rng = np.random.default_rng(0)
  return [edge.QueuedFrame(test_util.RandomFrame(rng, i), 0.0)
          for i in range(n)]


class BatchFramesTest(absltest.TestCase):

  def _Batches(self, items, batch_size=2, flush_s=0.01):
    q = queue.Queue()
    for item in items:
      q.put(item)
    q.put(edge._STOP)
    return list(edge.BatchFrames(q, edge.BatcherConfig(batch_size, flush_s)))

  def testFullBatches(self):
    frames = _Queued(5)
    batches = self._Batches(frames)
    self.assertEqual([2, 2, 1], [len(b) for b in batches])
    self.assertEqual(frames, [f for b in batches for f in b])

  def testControlFlushes(self):
    frames = _Queued(3)
    end = wire.ScanEnd(0)
    batches = self._Batches([frames[0], frames[1], end, frames[2]],
                            batch_size=4)
    self.assertEqual([[frames[0], frames[1]], end, [frames[2]]], batches)

  def testTimeoutFlush(self):
    q = queue.Queue()
    gen = edge.BatchFrames(q, edge.BatcherConfig(8, 0.01))
    frames = _Queued(2)
    q.put(frames[0])
    self.assertEqual([frames[0]], next(gen))
    q.put(frames[1])
    q.put(edge._STOP)
    self.assertEqual([[frames[1]]], list(gen))

  def testConfig(self):
    self.assertRaises(base.InvalidArgumentError, edge.BatcherConfig, 0)
    self.assertRaises(base.InvalidArgumentError, edge.BatcherConfig, 2, 0.0)


class StitchCanvasTest(absltest.TestCase):

  def testAverage(self):
    canvas = edge.StitchCanvas(8, 8)
    canvas.Stitch(np.ones((2, 2)), np.full((2, 2), 2.0), (3.0, 3.0))
    canvas.Stitch(np.full((2, 2), 3.0), np.zeros((2, 2)), (3.4, 3.6))
    amplitude, phase = canvas.Snapshot()
    self.assertEqual(1.0, amplitude[2, 2])
    self.assertEqual(2.0, amplitude[2, 3])
    self.assertEqual(1.0, phase[3, 3])
    self.assertEqual(3.0, amplitude[3, 4])
    self.assertEqual(0.0, amplitude[0, 0])
    self.assertEqual(6, int(canvas.Covered().sum()))
    self.assertEqual(2, canvas.frames_stitched)

  def testClipped(self):
    canvas = edge.StitchCanvas(4, 4)
    canvas.Stitch(np.ones((4, 4)), np.ones((4, 4)), (0.0, 0.0))
    canvas.Stitch(np.ones((2, 2)), np.ones((2, 2)), (20.0, 20.0))
    self.assertEqual(2, canvas.clipped_patches)
    self.assertEqual(4, int(canvas.Covered().sum()))
    self.assertTrue(canvas.Covered()[0, 0])

  def testBadSize(self):
    self.assertRaises(base.InvalidArgumentError, edge.StitchCanvas, 0, 4)

  def testDump(self):
    canvas = edge.StitchCanvas(4, 4)
    canvas.Stitch(np.ones((2, 2)), np.ones((2, 2)), (2.0, 2.0))
    out = self.create_tempdir().full_path
    paths = canvas.Dump(out, 'scan1')
    self.assertLen(paths, 4)
    self.assertTrue(os.path.exists(os.path.join(out, 'scan1_phase.pgm')))


class ModelHandleTest(absltest.TestCase):

  def testSwap(self):
    handle = edge.ModelHandle()
    self.assertIsNone(handle.version)
    self.assertIsNone(handle.WaitForModel(timeout=0.01))
    handle.Swap(test_util.TinyModel().Clone(version=2))
    self.assertEqual(2, handle.version)
    self.assertRaises(edge.StaleModelError, handle.Swap,
                      test_util.TinyModel().Clone(version=2))
    handle.Swap(test_util.TinyModel().Clone(version=3))
    self.assertEqual(3, handle.WaitForModel().version)


class LatencyTest(absltest.TestCase):

  def testEmpty(self):
    self.assertRaises(base.EmptyReportError, edge.LatencyRecorder().Report)

  def testReport(self):
    recorder = edge.LatencyRecorder()
    for i in range(10):
      recorder.Record(1, 0.001 * (i + 1), model_version=1)
    recorder.Record(4, 0.002, model_version=2)
    report = recorder.Report()
    self.assertEqual(11, report.frames)
    self.assertEqual([1, 2], report.model_versions)
    self.assertEqual([1, 4], [r[0] for r in report.rows])
    self.assertAlmostEqual(5500.0, report.rows[0][1])
    self.assertEqual(10, report.rows[0][6])
    self.assertLessEqual(report.p50_us, report.p99_us)
    path = os.path.join(self.create_tempdir().full_path, 'lat.csv')
    report.WriteCsv(path)
    with open(path) as f:
      self.assertEqual(','.join(edge.LATENCY_CSV_HEADER), f.readline().strip())


class SwapModelTest(absltest.TestCase):

  def testAcks(self):
    service = edge.EdgeService()
    payload = serialization.Serialize(test_util.TinyModel().Clone(version=1))
    self.assertTrue(service.SwapModel(payload).accepted)
    stale = service.SwapModel(payload)
    self.assertEqual(wire.ACK_STALE, stale.status)
    self.assertEqual(1, stale.model_version)
    corrupt = service.SwapModel(payload[:-3])
    self.assertEqual(wire.ACK_CORRUPT, corrupt.status)
    self.assertEqual(1, service.handle.version)

  def testMisshapenConvIsCorrupt(self):
    service = edge.EdgeService(model=test_util.TinyModel().Clone(version=1))
    payload = (struct.pack('<4sHQH', b'PTNN', 1, 5, 1) +
               struct.pack('<BB4I', layers.CONV3X3, 4, 1, 1, 9, 1) +
               np.zeros(10, dtype='<f4').tobytes())
    ack = service.SwapModel(payload)
    self.assertEqual(wire.ACK_CORRUPT, ack.status)
    self.assertEqual(1, service.handle.version)


class _Client(object):
  """Drives one frame connection over a socketpair."""

  def __init__(self, service):
    self.sock, server_sock = socket.socketpair()
    self.received = []
    self.service_error = []

    def Serve():
      try:
        service.HandleConnection(server_sock)
      except Exception as e:  # pylint: disable=broad-except
        self.service_error.append(e)
      finally:
        server_sock.close()

    self._server = threading.Thread(target=Serve)
    self._server.start()

  def SendAndCollect(self, messages, during=None):
    def Send():
      for i, msg in enumerate(messages):
        wire.SendMessage(self.sock, msg)
        if during is not None:
          during(i)
      self.sock.shutdown(socket.SHUT_WR)

    sender = threading.Thread(target=Send)
    sender.start()
    self.received = list(wire.ReadMessages(self.sock))
    sender.join()
    self._server.join(30)
    self.sock.close()
    return self.received

  def SendChunksAndCollect(self, data, chunk_sizes):
    """Writes data in pieces of the given sizes, then collects replies."""
    def Send():
      offset = 0
      for size in chunk_sizes:
        if offset >= len(data):
          break
        self.sock.sendall(data[offset:offset + size])
        offset += size
      if offset < len(data):
        self.sock.sendall(data[offset:])
      self.sock.shutdown(socket.SHUT_WR)

    sender = threading.Thread(target=Send)
    sender.start()
    self.received = list(wire.ReadMessages(self.sock))
    sender.join()
    self._server.join(30)
    self.sock.close()
    return self.received



def _Scan(n, scan_id=1):
  rng = np.random.default_rng(scan_id)
  frames = [test_util.RandomFrame(rng, i, scan_id,
                                  (8.0 + i % 40, 8.0 + (3 * i) % 40))
            for i in range(n)]
  return ([wire.ScanBegin(scan_id, n, 16, 8)] +
          [wire.FrameMessage(f) for f in frames] + [wire.ScanEnd(scan_id)])


class EdgeServiceTest(absltest.TestCase):

  def _Service(self, model=None, batch_size=4, queue_size=100, **kwargs):
    config = edge.EdgeConfig(edge.BatcherConfig(batch_size, 0.005),
                             queue_size=queue_size, canvas_shape=(64, 64),
                             **kwargs)
    return edge.EdgeService(config, model)

  def testExactlyOnce(self):
    service = self._Service(test_util.TinyModel().Clone(version=1),
                            batch_size=8, queue_size=4)
    received = _Client(service).SendAndCollect(_Scan(200))
    results = [m for m in received if isinstance(m, wire.ResultMessage)]
    self.assertEqual(list(range(200)), [r.frame_index for r in results])
    self.assertEqual(wire.ScanEnd(1), received[-1])
    self.assertEqual(200, service.results_sent)
    self.assertEqual(200, service.canvases[1].frames_stitched)
    self.assertEqual(200, service.recorder.frames)
    self.assertTrue(all(r.model_version == 1 for r in results))

  def testResultContents(self):
    model = test_util.TinyModel().Clone(version=1)
    service = self._Service(model)
    messages = _Scan(3)
    received = _Client(service).SendAndCollect(messages)
    result = received[0]
    frame = messages[1].frame
    self.assertEqual(frame.position, result.position)
    self.assertEqual((8, 8), result.amplitude.shape)
    amplitude, _ = model_lib.Infer(model, [frame])
    np.testing.assert_allclose(amplitude[0], result.amplitude, atol=1e-5)

  def testHotSwapIsMonotonic(self):
    service = self._Service(test_util.TinyModel().Clone(version=1))
    newer = serialization.Serialize(test_util.TinyModel(seed=1).Clone(
        version=2))

    def During(i):
      if i == 50:
        self.assertTrue(service.SwapModel(newer).accepted)

    received = _Client(service).SendAndCollect(_Scan(100), During)
    versions = [m.model_version for m in received
                if isinstance(m, wire.ResultMessage)]
    self.assertLen(versions, 100)
    self.assertEqual(sorted(versions), versions)
    self.assertEqual(2, versions[-1])

  def testWaitsForFirstModel(self):
    service = self._Service()
    payload = serialization.Serialize(test_util.TinyModel().Clone(version=4))
    timer = threading.Timer(0.2, service.SwapModel, args=(payload,))
    timer.start()
    received = _Client(service).SendAndCollect(_Scan(5))
    timer.join()
    self.assertEqual([4] * 5, [m.model_version for m in received
                               if isinstance(m, wire.ResultMessage)])

  def testDumps(self):
    out = self.create_tempdir().full_path
    service = self._Service(test_util.TinyModel().Clone(version=1),
                            dump_every=2, out_dir=out)
    _Client(service).SendAndCollect(_Scan(4, scan_id=6))
    names = sorted(os.listdir(out))
    self.assertIn('scan6_final_phase.pgm', names)
    self.assertIn('scan6_000002_amplitude.pgm', names)
    self.assertIn('scan6_000004_amplitude.pgm', names)
    self.assertIn(os.path.join(out, 'scan6_final_phase.pgm'), service.dumped)

  def testKeepsOnlyRecentFinishedCanvases(self):
    service = self._Service(test_util.TinyModel().Clone(version=1),
                            keep_finished=1)
    messages = _Scan(3, scan_id=1) + _Scan(3, scan_id=2) + _Scan(3, scan_id=3)
    _Client(service).SendAndCollect(messages)
    self.assertEqual([3], list(service.canvases))
    self.assertEqual(3, service.canvases[3].frames_stitched)

  def testKeepNoFinishedCanvases(self):
    service = self._Service(test_util.TinyModel().Clone(version=1),
                            keep_finished=0)
    received = _Client(service).SendAndCollect(_Scan(4, scan_id=2))
    self.assertEqual(wire.ScanEnd(2), received[-1])
    self.assertEqual({}, service.canvases)

  def testBadKeepFinished(self):
    self.assertRaises(base.InvalidArgumentError, edge.EdgeConfig,
                      keep_finished=-1)

  def testGarbageFailsConnection(self):
    service = self._Service(test_util.TinyModel().Clone(version=1))
    client = _Client(service)
    client.sock.sendall(b'GARBAGE!')
    client.sock.shutdown(socket.SHUT_WR)
    self.assertEqual([], list(wire.ReadMessages(client.sock)))
    client._server.join(30)
    client.sock.close()
    self.assertIsInstance(client.service_error[0], wire.BadMagicError)


class ChunkedHotSwapTest(parameterized.TestCase):
  """Random write boundaries and concurrent model pushes lose no frames."""

  @parameterized.parameters(*range(100))
  def testEveryFrameAnsweredOnce(self, seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(20, 61))
    config = edge.EdgeConfig(
        edge.BatcherConfig(int(rng.integers(1, 9)), 0.002),
        queue_size=int(rng.integers(1, 16)), canvas_shape=(64, 64))
    service = edge.EdgeService(config, test_util.TinyModel().Clone(version=1))
    messages = _Scan(n, scan_id=seed + 1)
    data = b''.join(wire.Encode(m) for m in messages)
    chunk_sizes = [int(s) for s in rng.integers(1, 200, size=len(data))]
    delays = sorted(float(d) for d in rng.uniform(0.0, 0.05, size=3))
    timers = [
        threading.Timer(delay, service.SwapModel, args=(
            serialization.Serialize(test_util.TinyModel().Clone(
                version=version)),))
        for version, delay in zip(range(2, 5), delays)]
    for timer in timers:
      timer.start()
    try:
      received = _Client(service).SendChunksAndCollect(data, chunk_sizes)
    finally:
      for timer in timers:
        timer.join()
    results = [m for m in received if isinstance(m, wire.ResultMessage)]
    self.assertEqual(sorted(f.frame.frame_index for f in messages[1:-1]),
                     sorted(r.frame_index for r in results))
    versions = [r.model_version for r in results]
    self.assertEqual(sorted(versions), versions)
    self.assertEqual(wire.ScanEnd(seed + 1), received[-1])


class EdgeServerTest(absltest.TestCase):

  def testPushModel(self):
    service = edge.EdgeService(edge.EdgeConfig(canvas_shape=(64, 64)))
    server = edge.EdgeServer(service, ('127.0.0.1', 0),
                             ('127.0.0.1', 0)).Start()
    try:
      model = test_util.TinyModel().Clone(version=3)
      self.assertTrue(edge.PushModel(server.model_endpoint, model).accepted)
      self.assertEqual(wire.ACK_STALE,
                       edge.PushModel(server.model_endpoint, model).status)
      self.assertEqual(3, service.handle.version)
      sock = socket.create_connection(server.frame_endpoint)
      for msg in _Scan(6):
        wire.SendMessage(sock, msg)
      sock.shutdown(socket.SHUT_WR)
      received = list(wire.ReadMessages(sock))
      sock.close()
      self.assertLen(received, 7)
    finally:
      server.Stop()
    self.assertEqual([], server.errors)


if __name__ == '__main__':
  absltest.main()
