#!/usr/bin/env python

"""Tests for the ptychostream subcommands."""

import os

from absl.testing import absltest
from mox3 import stubout

from ptychostream import base
from ptychostream import commands
from ptychostream import image_io
from ptychostream import orchestrator
from ptychostream import ptycho_app
from ptychostream import ptychostream_main
from ptychostream import simulator
from ptychostream.surrogate import serialization
from tests import test_util


class CommandsTest(absltest.TestCase):

  def setUp(self):
    self.stubs = stubout.StubOutForTesting()
    self.stubs.Set(ptycho_app, 'RUN', None)
    self.tmp = self.create_tempdir().full_path
    self.config_path = os.path.join(self.tmp, 'tiny.cfg')
    with open(self.config_path, 'w') as f:
      f.write(test_util.TinyConfig().Serialized())

  def tearDown(self):
    self.stubs.UnsetAll()

  def _Run(self, name, out, *extra):
    ptycho_app.RUN = None
    args = ptychostream_main.ParseFlags(
        ['ptychostream', name, '--config', self.config_path,
         '--out-dir', out] + list(extra))
    self.assertEqual(name, args.command)
    return commands.RunCommand(name, args)

  def _Manifest(self, out):
    with open(os.path.join(out, 'manifest.txt')) as f:
      return f.read().splitlines()

  def testParseFlags(self):
    args = ptychostream_main.ParseFlags(
        ['ptychostream', 'train', '--epochs', '3', '--pairs', 'corpus'])
    self.assertEqual('train', args.command)
    self.assertEqual('3', args.epochs)
    self.assertEqual('corpus', args.pairs)
    self.assertEqual('model.ptnn', args.out)
    self.assertIsNone(args.config)

  def testEveryCommandParses(self):
    for name in commands.COMMANDS:
      extra = ['--frames', 'x.frames'] if name == 'reconstruct' else []
      args = ptychostream_main.ParseFlags(['ptychostream', name] + extra)
      self.assertEqual(name, args.command)

  def testLoadConfigOverrides(self):
    args = ptychostream_main.ParseFlags(
        ['ptychostream', 'simulate', '--config', self.config_path,
         '--n-points', '12', '--photon-budget', '500'])
    cfg = commands.SimulateCmd().LoadConfig(args)
    self.assertEqual(12, cfg.n_points)
    self.assertEqual(500.0, cfg.photon_budget)
    self.assertEqual(test_util.OBJECT_SIZE, cfg.object_size)

  def testBadConfigKey(self):
    with open(self.config_path, 'a') as f:
      f.write('bogus = 1\n')
    args = ptychostream_main.ParseFlags(
        ['ptychostream', 'simulate', '--config', self.config_path])
    self.assertRaises(base.ConfigError, commands.SimulateCmd().LoadConfig,
                      args)

  def testSimulateThenReconstruct(self):
    sim_out = os.path.join(self.tmp, 'sim')
    self.assertEqual(0, self._Run('simulate', sim_out, '--scan-id', '2'))
    capture = os.path.join(sim_out, 'scan.frames')
    frames = simulator.ReadCapture(capture)
    self.assertLen(frames, 30)
    self.assertEqual(2, frames[0].scan_id)
    self.assertIn('scan.frames', self._Manifest(sim_out))
    self.assertIn('config.txt', self._Manifest(sim_out))

    recon_out = os.path.join(self.tmp, 'recon')
    self._Run('reconstruct', recon_out, '--frames', capture)
    for name in ('amplitude.pgm', 'phase.pgm', 'metadata.txt'):
      self.assertTrue(os.path.exists(os.path.join(recon_out, name)), name)

  def testReconstructAliases(self):
    args = ptychostream_main.ParseFlags(
        ['ptychostream', 'reconstruct', '--config', self.config_path,
         '--frames', 'x.frames', '--iters', '7', '--alpha', '0.5',
         '--beta', '0'])
    self.assertEqual('7', args.epie_iterations)
    cfg = commands.ReconstructCmd().LoadConfig(args)
    self.assertEqual(7, cfg.epie_iterations)
    self.assertEqual(0.5, cfg.epie_alpha)
    self.assertEqual(0.0, cfg.epie_beta)

  def testReconstructLongNamesStillWork(self):
    args = ptychostream_main.ParseFlags(
        ['ptychostream', 'reconstruct', '--frames', 'x.frames',
         '--epie-iterations', '3'])
    self.assertEqual('3', args.epie_iterations)

  def testSimulateOut(self):
    capture = os.path.join(self.tmp, 'captures', 'scan9.frames')
    out = os.path.join(self.tmp, 'sim')
    self._Run('simulate', out, '--scan-id', '9', '--n-points', '10',
              '--out', capture)
    frames = simulator.ReadCapture(capture)
    self.assertLen(frames, 10)
    self.assertEqual(9, frames[0].scan_id)
    self.assertFalse(os.path.exists(os.path.join(out, 'scan.frames')))

    recon_out = os.path.join(self.tmp, 'recon')
    self._Run('reconstruct', recon_out, '--frames', capture, '--iters', '2')
    self.assertTrue(os.path.exists(os.path.join(recon_out, 'metadata.txt')))

  def testSimulateStep(self):
    out = os.path.join(self.tmp, 'sim')
    self._Run('simulate', out, '--step', '4.0', '--n-points', '10')
    self.assertLen(simulator.ReadCapture(os.path.join(out, 'scan.frames')), 10)

  def testSimulateConnect(self):
    scans = []
    ingest = orchestrator.FrameIngestServer(
        ('127.0.0.1', 0), lambda frames, plan: scans.append((frames, plan)))
    ingest.Start()
    try:
      self._Run('simulate', os.path.join(self.tmp, 'sim'), '--scan-id', '5',
                '--connect', '127.0.0.1:%d' % ingest.endpoint[1])
    finally:
      ingest.Stop()
    self.assertLen(scans, 1)
    frames, plan = scans[0]
    self.assertLen(frames, 30)
    self.assertEqual(5, plan.scan_id)

  def testTrain(self):
    out = os.path.join(self.tmp, 'train')
    self._Run('train', out, '--epochs', '1')
    model = serialization.LoadModel(os.path.join(out, 'model.ptnn'))
    self.assertEqual(1, model.version)
    header, rows = image_io.ReadCsv(os.path.join(out, 'training.csv'))
    self.assertEqual('epoch', header[0])
    self.assertLen(rows, 1)

  def testBenchLatencyWithModel(self):
    model_path = serialization.SaveModel(
        test_util.TinyModel().Clone(version=7),
        os.path.join(self.tmp, 'tiny.ptnn'))
    out = os.path.join(self.tmp, 'bench')
    self._Run('bench-latency', out, '--model', model_path, '--bench-runs', '2')
    _, rows = image_io.ReadCsv(os.path.join(out, 'bench_latency.csv'))
    self.assertEqual(['1', '2'], [r[0] for r in rows])
    self.assertEqual('2', rows[0][6])


if __name__ == '__main__':
  absltest.main()
