#!/usr/bin/env python

"""Tests for ptychostream.ptycho_app."""

import os

from absl.testing import absltest
from mox3 import stubout

from ptychostream import base
from ptychostream import ptycho_app
from tests import test_util


class PtychoAppTest(absltest.TestCase):

  def setUp(self):
    self.stubs = stubout.StubOutForTesting()
    self.stubs.Set(ptycho_app, 'RUN', None)

  def tearDown(self):
    self.stubs.UnsetAll()

  def testInit(self):
    out = os.path.join(self.create_tempdir().full_path, 'run')
    run = ptycho_app.Init(out, seed=5)
    self.assertIs(run, ptycho_app.RUN)
    self.assertTrue(os.path.isdir(out))
    self.assertEqual(5, run.seed)
    self.assertRaises(base.Error, ptycho_app.Init, out)

  def testInitForTestReplaces(self):
    first, _ = test_util.InitRunForTest(self)
    second, _ = test_util.InitRunForTest(self)
    self.assertIsNot(first, second)
    self.assertIs(second, ptycho_app.RUN)

  def testPathAndManifest(self):
    run, out = test_util.InitRunForTest(self)
    path = run.Path('overlap', 'a.csv')
    self.assertTrue(os.path.isdir(os.path.dirname(path)))
    with open(path, 'w') as f:
      f.write('x\n')
    run.Record(path)
    manifest = run.Finish()
    with open(manifest) as f:
      self.assertEqual([os.path.join('overlap', 'a.csv')],
                       f.read().splitlines())
    self.assertIn('Wrote 1 artifacts', out.getvalue())


if __name__ == '__main__':
  absltest.main()
