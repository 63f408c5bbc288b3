#!/usr/bin/env python

"""Task-structured console output for ptychostream commands.

Long steps (a sweep, a pipeline run) are intermediate tasks: they print a
BEGINNING line, indent everything printed inside them, and close with a DONE
line. Short steps are immediate tasks that share one line with their result:

  BEGINNING: Overlap sweep
    Reconstructing dense test scan...Done
    Overlap 0.60 (30 points)...surrogate 0.912, ePIE 0.954
  DONE: Overlap sweep
"""

import sys
import time

from absl import logging

from ptychostream import base

IMMEDIATE = 'immediate'
INTERMEDIATE = 'intermediate'
FAILED = 'FAILED'


class UITask(object):
  """One entry on the UI's task stack; use it as a context manager."""

  def __init__(self, ui, name, description, style, clock=time.monotonic):
    if style not in (IMMEDIATE, INTERMEDIATE):
      raise base.InvalidArgumentError('unknown task style %r' % style)
    self.ui = ui
    self.name = name
    self.description = description
    self.style = style
    self.result = None
    self._clock = clock
    self._start = None

  def SetResult(self, result):
    """Record the one-line result shown when the task ends.

    Raises:
      base.Error: if a result was already set.
    """
    if self.result is not None:
      raise base.Error('Task %s already has result %r' % (self.name,
                                                           self.result))
    self.result = result

  def __enter__(self):
    self._start = self._clock()
    if self.style == IMMEDIATE:
      self.ui._OpenLine(self.description + '...')
    else:
      self.ui._Line('BEGINNING: %s' % self.description)
    self.ui._tasks.append(self)
    return self

  def __exit__(self, exc_type, value, traceback):
    tasks = self.ui._tasks
    if not tasks or tasks[-1] is not self:
      raise base.Error('Task %s ended out of order (current: %s)' % (
          self.name, tasks[-1].name if tasks else None))
    tasks.pop()
    result = FAILED if exc_type is not None else self.result
    elapsed = self._clock() - self._start
    if self.style == IMMEDIATE:
      self.ui._CloseLine(result or 'Done')
    elif result:
      self.ui._Line('DONE: %s (%s)' % (self.description, result))
    else:
      self.ui._Line('DONE: %s' % self.description)
    logging.info('%s %s in %.2fs%s', self.name,
                 'failed' if exc_type is not None else 'finished', elapsed,
                 ' (%s)' % result if result else '')
    return False


class StreamUI(object):
  """Prints task progress to a stream, indented by task depth.

  Attributes:
    out: file-like object, or None for sys.stdout at print time
  """

  def __init__(self, out=None):
    self.out = out
    self._tasks = []
    # True while an immediate task's "description..." awaits its result.
    self._line_open = False

  @property
  def depth(self):
    return len(self._tasks)

  def _Write(self, text):
    out = self.out or sys.stdout
    out.write(text)
    out.flush()

  def _Indent(self, text):
    pad = '  ' * self.depth
    return '\n'.join(pad + line for line in text.split('\n'))

  def _BreakLine(self):
    if self._line_open:
      self._Write('\n')
      self._line_open = False

  def _Line(self, text):
    self._BreakLine()
    self._Write(self._Indent(text) + '\n')

  def _OpenLine(self, text):
    self._BreakLine()
    self._Write(self._Indent(text))
    self._line_open = True

  def _CloseLine(self, result):
    if self._line_open:
      self._Write(result + '\n')
      self._line_open = False
    else:
      # Something printed inside the task; finish on a line of its own.
      self._Write(self._Indent('...' + result) + '\n')

  def Info(self, text):
    """Print text (possibly several lines) inside the current task."""
    self._Line(text)

  def BeginImmediateTask(self, name, description):
    return UITask(self, name, description, IMMEDIATE)

  def BeginIntermediateTask(self, name, description):
    return UITask(self, name, description, INTERMEDIATE)
