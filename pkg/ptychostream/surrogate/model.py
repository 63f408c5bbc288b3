#!/usr/bin/env python

"""The two-headed encoder-decoder surrogate.

A SurrogateModel is a flat layer list: a shared encoder followed by the
amplitude head (ending in a sigmoid) and the phase head (ending in a scaled
tanh). The split points are recovered from the positions of those two
activations, so a model file needs no extra topology record.
"""

import numpy as np

from ptychostream import base
from ptychostream.surrogate import layers as layers_lib
from ptychostream.surrogate import preprocess


DEFAULT_FRAME_SIZE = 64
DEFAULT_BASE_CHANNELS = 32
ENCODER_STAGES = 3


class SurrogateModel(object):
  """A frozen network snapshot plus its bookkeeping.

  Attributes:
    layers: list of layers.Layer
    version: int, increases with every retrain
    trained_on_pairs: int, corpus size of the training run that produced it
    val_loss: float or None, validation MAE recorded at selection time
  """

  def __init__(self, layers, version=0, trained_on_pairs=0, val_loss=None):
    self.layers = list(layers)
    self.version = int(version)
    self.trained_on_pairs = int(trained_on_pairs)
    self.val_loss = val_loss
    self._encoder_end, self._amp_end = _SplitPoints(self.layers)
    self._downsample = 2 ** sum(
        1 for l in self.Encoder() if l.KIND == layers_lib.MAXPOOL2)
    self._upsample = 2 ** sum(
        1 for l in self.AmplitudeHead() if l.KIND == layers_lib.UPSAMPLE2)

  def Encoder(self):
    return self.layers[:self._encoder_end]

  def AmplitudeHead(self):
    return self.layers[self._encoder_end:self._amp_end]

  def PhaseHead(self):
    return self.layers[self._amp_end:]

  def Params(self):
    """Every parameter array, in layer order."""
    return [p for l in self.layers for p in l.Params()]

  @property
  def param_count(self):
    return sum(l.ParamCount() for l in self.layers)

  @property
  def dtype(self):
    params = self.Params()
    return params[0].dtype if params else np.dtype(np.float32)

  def PatchSize(self, frame_size):
    """Output K for an input of frame_size x frame_size."""
    return frame_size // self._downsample * self._upsample

  def CheckInput(self, batch):
    if batch.ndim != 4 or batch.shape[2] != batch.shape[3]:
      raise base.ShapeMismatchError(
          'input must be (B, 1, N, N), got %s' % (batch.shape,))
    first = self.layers[0]
    if first.KIND == layers_lib.CONV3X3 and batch.shape[1] != first.c_in:
      raise base.ShapeMismatchError(
          'model takes %d channel(s), got %d' % (first.c_in, batch.shape[1]))
    if batch.shape[2] % self._downsample:
      raise base.ShapeMismatchError(
          'frame size %d not divisible by %d' %
          (batch.shape[2], self._downsample))

  def ForwardWithCaches(self, batch):
    """Forward pass keeping what Backward needs.

    Returns:
      (amplitude, phase, caches)
    """
    self.CheckInput(batch)
    x = batch.astype(self.dtype, copy=False)
    caches = []
    for l in self.Encoder():
      x, c = l.Forward(x)
      caches.append(c)
    outputs = []
    for head in (self.AmplitudeHead(), self.PhaseHead()):
      y = x
      for l in head:
        y, c = l.Forward(y)
        caches.append(c)
      outputs.append(y)
    return outputs[0], outputs[1], caches

  def Forward(self, batch):
    """Infer (amplitude, phase) patches, each (B, 1, K, K)."""
    amplitude, phase, _ = self.ForwardWithCaches(batch)
    return amplitude, phase

  def Backward(self, d_amplitude, d_phase, caches):
    """Gradients of every parameter array, aligned with Params()."""
    grads = [None] * len(self.layers)
    d_shared = None
    for head_start, head_end, dy in (
        (self._encoder_end, self._amp_end, d_amplitude),
        (self._amp_end, len(self.layers), d_phase)):
      for i in range(head_end - 1, head_start - 1, -1):
        dy, g = self.layers[i].Backward(dy, caches[i])
        grads[i] = g
      d_shared = dy if d_shared is None else d_shared + dy
    dy = d_shared
    for i in range(self._encoder_end - 1, -1, -1):
      dy, g = self.layers[i].Backward(dy, caches[i])
      grads[i] = g
    return [p for g in grads for p in g]

  def Clone(self, version=None):
    return SurrogateModel([l.Clone() for l in self.layers],
                          self.version if version is None else version,
                          self.trained_on_pairs, self.val_loss)

  def __eq__(self, other):
    if not isinstance(other, SurrogateModel):
      return False
    if self.version != other.version or len(self.layers) != len(other.layers):
      return False
    for a, b in zip(self.layers, other.layers):
      if a.KIND != b.KIND or tuple(a.Dims()) != tuple(b.Dims()):
        return False
      for pa, pb in zip(a.Params(), b.Params()):
        if pa.dtype != pb.dtype or pa.tobytes() != pb.tobytes():
          return False
    return True

  def __ne__(self, other):
    return not self == other

  def __repr__(self):
    return '<SurrogateModel v%d: %d layers, %d params>' % (
        self.version, len(self.layers), self.param_count)


def _SplitPoints(layers):
  kinds = [l.KIND for l in layers]
  if not kinds or kinds[-1] != layers_lib.SCALED_TANH:
    raise base.InvalidArgumentError('model must end in the phase head')
  if layers_lib.SIGMOID not in kinds:
    raise base.InvalidArgumentError('model has no amplitude head')
  s = kinds.index(layers_lib.SIGMOID)
  t = len(kinds) - 1
  head = t - s
  encoder_end = s + 1 - head
  if encoder_end < 0:
    raise base.InvalidArgumentError('amplitude and phase heads differ')
  amp = [l.KIND for l in layers[encoder_end:s + 1]]
  phase = [l.KIND for l in layers[s + 1:]]
  if amp[:-1] != phase[:-1]:
    raise base.InvalidArgumentError('amplitude and phase heads differ')
  return encoder_end, s + 1


def _Head(channels, upsample_stages, final, rng, dtype):
  head = [layers_lib.Conv3x3.Init(channels, channels, rng, dtype),
          layers_lib.LeakyReLU()]
  c = channels
  for _ in range(upsample_stages):
    c_next = max(1, c // 2)
    head += [layers_lib.Upsample2(),
             layers_lib.Conv3x3.Init(c, c_next, rng, dtype),
             layers_lib.LeakyReLU()]
    c = c_next
  head += [layers_lib.Conv3x3.Init(c, 1, rng, dtype), final]
  return head


def BuildModel(frame_size=DEFAULT_FRAME_SIZE, patch_size=None,
               base_channels=DEFAULT_BASE_CHANNELS, seed=0,
               dtype=np.float32):
  """A freshly initialized default-architecture model.

  Three encoder stages of [conv, lrelu, conv, lrelu, maxpool] with widths
  b, 2b, 4b bring N down to N/8; each head upsamples back to K.

  Args:
    frame_size: int N, divisible by 8
    patch_size: int K, N/8 times a power of two; default N/2
    base_channels: int b; 32 gives the 0.77M parameter default
    seed: int
    dtype: parameter dtype, float32 normally, float64 for gradient checks

  Returns:
    SurrogateModel with version 0
  """
  scale = 2 ** ENCODER_STAGES
  if frame_size <= 0 or frame_size % scale:
    raise base.InvalidArgumentError(
        'frame size must be a positive multiple of %d, got %r' %
        (scale, frame_size))
  patch_size = patch_size or frame_size // 2
  bottom = frame_size // scale
  ratio = patch_size // bottom
  if patch_size % bottom or ratio < 1 or ratio & (ratio - 1):
    raise base.InvalidArgumentError(
        'patch size %d must be %d times a power of two' % (patch_size, bottom))
  base.CheckPositive('base_channels', base_channels)
  upsample_stages = ratio.bit_length() - 1

  rng = np.random.default_rng(seed)
  layers = []
  c_in = 1
  for stage in range(ENCODER_STAGES):
    c = base_channels * 2 ** stage
    layers += [layers_lib.Conv3x3.Init(c_in, c, rng, dtype),
               layers_lib.LeakyReLU(),
               layers_lib.Conv3x3.Init(c, c, rng, dtype),
               layers_lib.LeakyReLU(),
               layers_lib.MaxPool2()]
    c_in = c
  layers += _Head(c_in, upsample_stages, layers_lib.Sigmoid(), rng, dtype)
  layers += _Head(c_in, upsample_stages, layers_lib.ScaledTanh(), rng, dtype)
  return SurrogateModel(layers)


def Infer(model, frames, scale_factor=1.0):
  """Preprocess frames and run the model.

  Returns:
    (amplitude, phase), each (len(frames), K, K) float32
  """
  batch = preprocess.PreprocessBatch(frames, scale_factor)
  amplitude, phase = model.Forward(batch)
  return amplitude[:, 0].astype(np.float32), phase[:, 0].astype(np.float32)
