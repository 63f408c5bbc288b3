#!/usr/bin/env python

"""Model files.

  magic 'PTNN' | format u16 | model version u64 | layer count u16
  per layer: kind u8 | rank u8 | rank x dims u32 | f32 weights | f32 biases

Everything is little-endian. Bias length is dims[0] for layers with
parameters; parameterless layers have rank 0 and no data.
"""

import os
import struct

import numpy as np

from ptychostream import base
from ptychostream.surrogate import layers as layers_lib
from ptychostream.surrogate import model as model_lib


MAGIC = b'PTNN'
FORMAT_VERSION = 1

_HEADER = struct.Struct('<4sHQH')
_LAYER = struct.Struct('<BB')
_F32 = np.dtype('<f4')


class ModelFormatError(base.Error):
  """A model file could not be decoded."""


class BadModelMagicError(ModelFormatError):
  pass


class ModelVersionError(ModelFormatError):
  """The file uses a format version this reader does not know."""


class ModelTruncatedError(ModelFormatError):
  pass


def Serialize(model):
  """Encode model as bytes; parameters are written as float32."""
  out = [_HEADER.pack(MAGIC, FORMAT_VERSION, model.version, len(model.layers))]
  for layer in model.layers:
    dims = tuple(layer.Dims())
    out.append(_LAYER.pack(layer.KIND, len(dims)))
    out.append(struct.pack('<%dI' % len(dims), *dims))
    for p in layer.Params():
      out.append(p.astype(_F32).tobytes())
  return b''.join(out)


class _Reader(object):

  def __init__(self, data):
    self.data = memoryview(data)
    self.offset = 0

  def Take(self, n):
    if self.offset + n > len(self.data):
      raise ModelTruncatedError(
          'model data ends at byte %d, needed %d more' %
          (len(self.data), self.offset + n - len(self.data)))
    chunk = self.data[self.offset:self.offset + n]
    self.offset += n
    return chunk

  def Unpack(self, fmt):
    return fmt.unpack(self.Take(fmt.size))

  def Floats(self, count):
    return np.frombuffer(self.Take(4 * count), dtype=_F32).astype(np.float32)


def Deserialize(data):
  """Decode bytes from Serialize into a SurrogateModel.

  Raises:
    BadModelMagicError, ModelVersionError, ModelTruncatedError, or
    ModelFormatError for any other inconsistency. No partial model is ever
    returned.
  """
  reader = _Reader(data)
  if len(data) < len(MAGIC) or bytes(data[:len(MAGIC)]) != MAGIC:
    raise BadModelMagicError('not a model file: %r' % bytes(data[:4]))
  magic, fmt, version, n_layers = reader.Unpack(_HEADER)
  if fmt != FORMAT_VERSION:
    raise ModelVersionError('unsupported model format %d' % fmt)
  layers = []
  for _ in range(n_layers):
    kind, rank = reader.Unpack(_LAYER)
    dims = struct.unpack('<%dI' % rank, reader.Take(4 * rank))
    if kind not in layers_lib.KINDS:
      raise ModelFormatError('unknown layer kind %d' % kind)
    if kind == layers_lib.CONV3X3:
      if rank != 4 or dims[2:] != (3, 3):
        raise ModelFormatError('conv layer dims %s are not (out, in, 3, 3)'
                               % (dims,))
      count = dims[0] * dims[1] * 9
      weight = reader.Floats(count)
      bias = reader.Floats(dims[0])
      try:
        layers.append(layers_lib.MakeLayer(kind, dims, weight, bias))
      except (base.Error, ValueError) as e:
        raise ModelFormatError('bad conv layer: %s' % e)
    else:
      if rank:
        raise ModelFormatError('parameterless layer %d with rank %d' %
                               (kind, rank))
      layers.append(layers_lib.MakeLayer(kind))
  if reader.offset != len(data):
    raise ModelFormatError('%d trailing bytes after model' %
                           (len(data) - reader.offset))
  try:
    return model_lib.SurrogateModel(layers, version=version)
  except (base.Error, ValueError) as e:
    raise ModelFormatError('bad model topology: %s' % e)


def SaveModel(model, path):
  base.MakeDir(os.path.dirname(os.path.abspath(path)))
  tmp = path + '.tmp'
  with open(tmp, 'wb') as f:
    f.write(Serialize(model))
  os.replace(tmp, path)
  return path


def LoadModel(path):
  with open(path, 'rb') as f:
    return Deserialize(f.read())
