#!/usr/bin/env python

"""End-to-end run of the loopback pipeline on a tiny scene."""

import os

from absl.testing import absltest

from ptychostream import image_io
from ptychostream import orchestrator
from ptychostream import pipeline
from tests import test_util


class PipelineTest(absltest.TestCase):

  def testTwoScans(self):
    cfg = test_util.TinyConfig(n_scans=2)
    run, out = test_util.InitRunForTest(self)
    summary = pipeline.RunPipeline(cfg, run)

    self.assertEqual(60, summary.frames_streamed)
    self.assertEqual(60, summary.results_received)
    self.assertEqual(1, summary.registry_versions[0])
    self.assertEqual(1, summary.models_pushed[0])
    self.assertEqual(summary.registry_versions, summary.models_pushed)
    actions = [a.action for a in summary.actions]
    self.assertEqual(orchestrator.COLD_START, actions[0])
    self.assertIn(actions[1], (orchestrator.RETRAIN, orchestrator.SUSPEND))
    self.assertEqual([0, 1], [a.scan_id for a in summary.actions])
    self.assertIsNotNone(summary.latency)
    self.assertEqual(60, summary.latency.frames)
    self.assertIsNotNone(summary.final_ssim)
    self.assertBetween(summary.final_ssim, -1.0, 1.0)

    for name in ('summary.txt', 'actions.csv', 'line_profile.csv',
                 'edge_latency.csv'):
      self.assertIn(name, run.manifest.Paths())
    header, rows = image_io.ReadCsv(os.path.join(run.out_dir, 'actions.csv'))
    self.assertEqual(pipeline.ACTIONS_CSV_HEADER, header)
    self.assertEqual(['0', orchestrator.COLD_START], rows[0][:2])
    _, profile = image_io.ReadCsv(os.path.join(run.out_dir,
                                               'line_profile.csv'))
    self.assertLen(profile, test_util.OBJECT_SIZE)
    with open(os.path.join(run.out_dir, 'summary.txt')) as f:
      self.assertIn('frames_streamed: 60', f.read())
    self.assertIn('DONE: Streaming 2 scans', out.getvalue())


if __name__ == '__main__':
  absltest.main()
