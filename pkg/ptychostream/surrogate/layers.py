#!/usr/bin/env python

"""Layers of the surrogate network with hand-written reverse-mode gradients.

Tensors are (batch, channels, height, width) numpy arrays. Layers are
stateless apart from their parameters: Forward returns the output and a
cache, and Backward turns an output gradient plus that cache into the input
gradient and one gradient per parameter array.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from ptychostream import base


CONV3X3 = 0
RELU = 1
LEAKY_RELU = 2
MAXPOOL2 = 3
UPSAMPLE2 = 4
SIGMOID = 5
SCALED_TANH = 6

LEAKY_SLOPE = 0.01


class Layer(object):
  """Base class; subclasses set KIND and implement Forward/Backward."""

  KIND = None

  def Params(self):
    """The parameter arrays, in serialization order."""
    return []

  def ParamCount(self):
    return sum(p.size for p in self.Params())

  def Dims(self):
    """Shape recorded for this layer in a model file."""
    return ()

  def Forward(self, x):
    raise NotImplementedError

  def Backward(self, dy, cache):
    raise NotImplementedError

  def Clone(self):
    return self

  def __repr__(self):
    return '<%s>' % type(self).__name__


class Conv3x3(Layer):
  """3x3 convolution, stride 1, zero padding 1."""

  KIND = CONV3X3

  def __init__(self, weight, bias):
    if weight.ndim != 4 or weight.shape[2:] != (3, 3):
      raise base.InvalidArgumentError(
          'conv weight must be (out, in, 3, 3), got %s' % (weight.shape,))
    if bias.shape != (weight.shape[0],):
      raise base.ShapeMismatchError(
          'bias %s does not match %d output channels' %
          (bias.shape, weight.shape[0]))
    self.weight = weight
    self.bias = bias

  @classmethod
  def Init(cls, c_in, c_out, rng, dtype=np.float32):
    """He-normal weights, zero bias."""
    std = np.sqrt(2.0 / (9 * c_in))
    weight = (rng.standard_normal((c_out, c_in, 3, 3)) * std).astype(dtype)
    return cls(weight, np.zeros(c_out, dtype=dtype))

  @property
  def c_in(self):
    return self.weight.shape[1]

  @property
  def c_out(self):
    return self.weight.shape[0]

  def Params(self):
    return [self.weight, self.bias]

  def Dims(self):
    return self.weight.shape

  def Forward(self, x):
    if x.shape[1] != self.c_in:
      raise base.ShapeMismatchError(
          'conv expects %d input channels, got %d' % (self.c_in, x.shape[1]))
    x = x.astype(self.weight.dtype, copy=False)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    windows = sliding_window_view(xp, (3, 3), axis=(2, 3))
    y = np.tensordot(windows, self.weight, axes=([1, 4, 5], [1, 2, 3]))
    y = y.transpose(0, 3, 1, 2) + self.bias[None, :, None, None]
    return np.ascontiguousarray(y), windows

  def Backward(self, dy, windows):
    dy = dy.astype(self.weight.dtype, copy=False)
    b, _, h, w = dy.shape
    d_bias = dy.sum(axis=(0, 2, 3))
    d_weight = np.tensordot(dy, windows, axes=([0, 2, 3], [0, 2, 3]))
    dxp = np.zeros((b, self.c_in, h + 2, w + 2), dtype=dy.dtype)
    for i in range(3):
      for j in range(3):
        contrib = np.tensordot(dy, self.weight[:, :, i, j], axes=([1], [0]))
        dxp[:, :, i:i + h, j:j + w] += contrib.transpose(0, 3, 1, 2)
    return dxp[:, :, 1:-1, 1:-1], [d_weight, d_bias]

  def Clone(self):
    return Conv3x3(self.weight.copy(), self.bias.copy())

  def __repr__(self):
    return '<Conv3x3 %d->%d>' % (self.c_in, self.c_out)


class ReLU(Layer):
  KIND = RELU

  def Forward(self, x):
    return np.maximum(x, 0), x > 0

  def Backward(self, dy, positive):
    return dy * positive, []


class LeakyReLU(Layer):
  KIND = LEAKY_RELU

  def Forward(self, x):
    positive = x > 0
    return np.where(positive, x, x * LEAKY_SLOPE), positive

  def Backward(self, dy, positive):
    return np.where(positive, dy, dy * LEAKY_SLOPE), []


class MaxPool2(Layer):
  """2x2 max pooling, stride 2. Ties route the gradient to the first max."""

  KIND = MAXPOOL2

  def Forward(self, x):
    b, c, h, w = x.shape
    if h % 2 or w % 2:
      raise base.ShapeMismatchError('maxpool needs even sizes, got %dx%d' %
                                    (h, w))
    blocks = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(b, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return y, (x.shape, idx)

  def Backward(self, dy, cache):
    shape, idx = cache
    b, c, h, w = shape
    one_hot = np.arange(4) == idx[..., None]
    d_blocks = one_hot * dy[..., None]
    dx = d_blocks.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return dx.reshape(shape).astype(dy.dtype, copy=False), []


class Upsample2(Layer):
  """Nearest-neighbor 2x upsampling."""

  KIND = UPSAMPLE2

  def Forward(self, x):
    return x.repeat(2, axis=2).repeat(2, axis=3), None

  def Backward(self, dy, cache):
    b, c, h, w = dy.shape
    return dy.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)), []


class Sigmoid(Layer):
  KIND = SIGMOID

  def Forward(self, x):
    y = special.expit(x)
    return y, y

  def Backward(self, dy, y):
    return dy * y * (1 - y), []


class ScaledTanh(Layer):
  """pi * tanh(x), the phase head's range map onto [-pi, pi]."""

  KIND = SCALED_TANH

  def Forward(self, x):
    t = np.tanh(x)
    return (np.pi * t).astype(x.dtype, copy=False), t

  def Backward(self, dy, t):
    return (dy * (np.pi * (1 - t * t))).astype(dy.dtype, copy=False), []


_PARAMETERLESS = {
    RELU: ReLU,
    LEAKY_RELU: LeakyReLU,
    MAXPOOL2: MaxPool2,
    UPSAMPLE2: Upsample2,
    SIGMOID: Sigmoid,
    SCALED_TANH: ScaledTanh,
}

KINDS = frozenset([CONV3X3]) | frozenset(_PARAMETERLESS)


def MakeLayer(kind, dims=(), weight=None, bias=None):
  """Rebuild a layer from its model-file record."""
  if kind == CONV3X3:
    return Conv3x3(weight.reshape(dims), bias)
  try:
    return _PARAMETERLESS[kind]()
  except KeyError:
    raise base.InvalidArgumentError('unknown layer kind %r' % kind)
