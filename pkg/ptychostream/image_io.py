#!/usr/bin/env python

"""Image and table output: 16-bit PGM with .range sidecars, and CSV files.

A RealImage is written as a binary P5 PGM with 16-bit big-endian samples,
linearly mapped from [min, max]. The mapping is recorded in '<name>.range'
as two decimal floats so ReadImage can undo it.
"""

import csv
import os

import numpy as np
from PIL import Image

from ptychostream import base
from ptychostream import core


PGM_MAXVAL = 65535


def RangePath(pgm_path):
  """The sidecar file for pgm_path: foo.pgm -> foo.range."""
  return os.path.splitext(pgm_path)[0] + '.range'


def WriteImage(path, img):
  """Write img as PGM + range sidecar.

  Args:
    path: str, destination ending in .pgm
    img: RealImage

  Returns:
    list of str, the two files written
  """
  img = core.CheckImage(img)
  if not np.all(np.isfinite(img)):
    raise base.InvalidArgumentError('cannot write non-finite image %s' % path)
  lo = float(img.min())
  hi = float(img.max())
  if hi > lo:
    q = np.rint((img - lo) / (hi - lo) * PGM_MAXVAL)
  else:
    q = np.zeros(img.shape)
  base.MakeDir(os.path.dirname(os.path.abspath(path)))
  Image.fromarray(q.astype(np.int32)).save(path, format='PPM')
  range_path = RangePath(path)
  with open(range_path, 'w') as f:
    f.write('%r %r\n' % (lo, hi))
  return [path, range_path]


def ReadImage(path):
  """Read a PGM written by WriteImage back into a float64 image."""
  with open(RangePath(path)) as f:
    fields = f.read().split()
  if len(fields) != 2:
    raise base.Error('Malformed range file for %s' % path)
  lo, hi = float(fields[0]), float(fields[1])
  with Image.open(path) as im:
    q = np.asarray(im, dtype=np.float64)
  if hi > lo:
    return lo + q / PGM_MAXVAL * (hi - lo)
  return np.full(q.shape, lo)


def WriteCsv(path, header, rows):
  """Write an RFC-4180 CSV with a header row.

  Args:
    path: str
    header: seq of str, the column names in order
    rows: seq of seq, each the same length as header

  Returns:
    str, path
  """
  base.MakeDir(os.path.dirname(os.path.abspath(path)))
  with open(path, 'w', newline='') as f:
    writer = csv.writer(f, lineterminator='\r\n')
    writer.writerow(header)
    for row in rows:
      if len(row) != len(header):
        raise base.InvalidArgumentError(
            'row has %d fields, header has %d' % (len(row), len(header)))
      writer.writerow([_CsvField(v) for v in row])
  return path


def ReadCsv(path):
  """Return (header, rows) with every field as str."""
  with open(path, newline='') as f:
    rows = list(csv.reader(f))
  if not rows:
    raise base.Error('Empty CSV file %s' % path)
  return rows[0], rows[1:]


def _CsvField(value):
  if isinstance(value, (float, np.floating)):
    return repr(float(value))
  return value


class Manifest(object):
  """Records every artifact a command writes under its output directory."""

  def __init__(self, out_dir):
    self.out_dir = out_dir
    self._paths = []

  def Add(self, *paths):
    for p in paths:
      rel = os.path.relpath(p, self.out_dir)
      if rel not in self._paths:
        self._paths.append(rel)

  def Paths(self):
    return list(self._paths)

  def Write(self):
    """Write manifest.txt listing every recorded artifact; returns its path."""
    base.MakeDir(self.out_dir)
    path = os.path.join(self.out_dir, 'manifest.txt')
    with open(path, 'w') as f:
      for p in self._paths:
        f.write(p + '\n')
    return path
