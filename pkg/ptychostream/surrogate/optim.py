#!/usr/bin/env python

"""ADAM and the triangular cyclic learning rate."""

import numpy as np

from ptychostream import base


class Adam(object):
  """ADAM with bias correction, updating parameter arrays in place."""

  def __init__(self, params, beta1=0.9, beta2=0.999, epsilon=1e-8):
    self.beta1 = beta1
    self.beta2 = beta2
    self.epsilon = epsilon
    self.t = 0
    self._m = [np.zeros_like(p) for p in params]
    self._v = [np.zeros_like(p) for p in params]

  def Step(self, params, grads, lr):
    """Apply one update with learning rate lr."""
    if len(params) != len(self._m) or len(grads) != len(params):
      raise base.ShapeMismatchError(
          'optimizer tracks %d arrays, got %d params and %d grads' %
          (len(self._m), len(params), len(grads)))
    self.t += 1
    c1 = 1.0 - self.beta1 ** self.t
    c2 = 1.0 - self.beta2 ** self.t
    for p, g, m, v in zip(params, grads, self._m, self._v):
      m *= self.beta1
      m += (1.0 - self.beta1) * g
      v *= self.beta2
      v += (1.0 - self.beta2) * g * g
      if lr:
        m_hat = m / c1
        v_hat = v / c2
        p -= (lr * m_hat / (np.sqrt(v_hat) + self.epsilon)).astype(p.dtype)


def CyclicLearningRate(epoch, base_lr, max_lr, cycle_length):
  """Triangular policy: base_lr at cycle boundaries, max_lr mid-cycle.

  Args:
    epoch: int or float, epochs elapsed
    base_lr: float
    max_lr: float >= base_lr
    cycle_length: epochs per full cycle (up and back down)
  """
  base.CheckPositive('cycle_length', cycle_length)
  step = cycle_length / 2.0
  cycle = np.floor(1 + epoch / (2 * step))
  x = abs(epoch / step - 2 * cycle + 1)
  return float(base_lr + (max_lr - base_lr) * max(0.0, 1.0 - x))
