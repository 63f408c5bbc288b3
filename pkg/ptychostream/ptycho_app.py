#!/usr/bin/env python

"""Globals that every ptychostream command can access."""

import os

from absl import flags

from ptychostream import base
from ptychostream import image_io
from ptychostream import stream_ui

FLAGS = flags.FLAGS


# RUN is the current run. Command code can assume it is non-None once
# Init (or InitForTest) has been called.
RUN = None


class PtychoRun(object):
  """The environment any command can depend on.

  Attributes:
    out_dir: str, where every artifact of the run goes
    ui: StreamUI
    manifest: image_io.Manifest of the artifacts written
    seed: int
  """

  def __init__(self, out_dir, ui, seed, for_test=False):
    self.out_dir = out_dir
    self.ui = ui
    self.seed = seed
    self.manifest = image_io.Manifest(out_dir)
    self.for_test = for_test

  def Path(self, *parts):
    """A path under out_dir; its parent directories are created."""
    path = os.path.join(self.out_dir, *parts)
    base.MakeDir(os.path.dirname(path))
    return path

  def Record(self, *paths):
    self.manifest.Add(*paths)

  def Finish(self):
    """Write manifest.txt; returns its path."""
    path = self.manifest.Write()
    self.ui.Info('Wrote %d artifacts to %s' % (len(self.manifest.Paths()),
                                               self.out_dir))
    return path


def Init(out_dir, seed=None):
  """Initialize the run.

  Args:
    out_dir: str, output directory, created if missing
    seed: int, defaults to --seed
  """
  global RUN
  if RUN and not RUN.for_test:
    raise base.Error('ptychostream already initialized')
  base.MakeDir(out_dir)
  RUN = PtychoRun(out_dir, stream_ui.StreamUI(),
                  FLAGS.seed if seed is None else seed)
  return RUN


def InitForTest(out_dir, ui=None):
  """Initialize for test, replacing any previous run."""
  global RUN
  base.MakeDir(out_dir)
  RUN = PtychoRun(out_dir, ui or stream_ui.StreamUI(), 0, for_test=True)
  return RUN
