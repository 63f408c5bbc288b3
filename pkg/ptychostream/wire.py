#!/usr/bin/env python

"""The ptychostream wire protocol.

Every message is a 12-byte header followed by a little-endian body:

  magic 'PTYS' | version u8 | type u8 | flags u8 | reserved u8 | length u32

Bodies by type:
  FRAME       scan_id u64, frame_index u32, pos_y f64, pos_x f64,
              exposure_ms f32, N u16, N*N u16 counts
  MODEL       a serialized surrogate model, opaque to this module
  RESULT      scan_id u64, frame_index u32, model_version u64, pos_y f64,
              pos_x f64, K u16, K*K f32 amplitude, K*K f32 phase
  SCAN_BEGIN  scan_id u64, n_points u32, N u16, K u16
  SCAN_END    scan_id u64
  HEARTBEAT   empty
  ACK         model_version u64, status u8, UTF-8 reason
"""

import socket
import struct
import threading
import time

from absl import logging
import numpy as np

from ptychostream import base


MAGIC = b'PTYS'
PROTOCOL_VERSION = 1
HEADER = struct.Struct('<4sBBBBI')
HEADER_SIZE = HEADER.size
MAX_PAYLOAD = 64 << 20

FRAME = 1
MODEL = 2
RESULT = 3
SCAN_BEGIN = 4
SCAN_END = 5
HEARTBEAT = 6
ACK = 7

ACK_ACCEPTED = 0
ACK_STALE = 1
ACK_CORRUPT = 2

_FRAME_HEAD = struct.Struct('<QIddfH')
_RESULT_HEAD = struct.Struct('<QIQddH')
_SCAN_BEGIN = struct.Struct('<QIHH')
_SCAN_END = struct.Struct('<Q')
_ACK_HEAD = struct.Struct('<QB')

_COUNTS_DTYPE = np.dtype('<u2')
_FLOAT_DTYPE = np.dtype('<f4')


class WireError(base.Error):
  """The byte stream could not be decoded."""


class BadMagicError(WireError):
  """A header did not start with 'PTYS'."""


class VersionError(WireError):
  """A header carried a protocol version this decoder does not speak."""


class PayloadTooLargeError(WireError):
  """A message body exceeds MAX_PAYLOAD."""


class UnknownMessageError(WireError):
  """A header carried an unknown message type."""


class TruncatedMessageError(WireError):
  """A message body is shorter than its layout requires."""


class TrailingBytesError(WireError):
  """A fixed-layout message body carries bytes past its layout."""


class Message(object):
  """Base class of every wire message."""

  TYPE = None

  def Body(self):
    raise NotImplementedError

  def _Key(self):
    raise NotImplementedError

  def __eq__(self, other):
    return type(self) is type(other) and self._Key() == other._Key()

  def __ne__(self, other):
    return not self == other

  def __hash__(self):
    return hash(self.TYPE)


class FrameMessage(Message):
  """Carries one DiffractionFrame."""

  TYPE = FRAME

  def __init__(self, frame):
    self.frame = frame

  def Body(self):
    f = self.frame
    head = _FRAME_HEAD.pack(f.scan_id, f.frame_index, f.position[0],
                            f.position[1], f.exposure_ms, f.size)
    return head + f.counts.astype(_COUNTS_DTYPE, copy=False).tobytes()

  def _Key(self):
    return (self.frame,)

  def __repr__(self):
    return '<FrameMessage %r>' % (self.frame,)


class ModelMessage(Message):
  """Carries a serialized SurrogateModel."""

  TYPE = MODEL

  def __init__(self, payload):
    self.payload = bytes(payload)

  @classmethod
  def FromModel(cls, model):
    from ptychostream.surrogate import serialization
    return cls(serialization.Serialize(model))

  def Model(self):
    """Deserialize the payload; raises a ModelFormatError when corrupt."""
    from ptychostream.surrogate import serialization
    return serialization.Deserialize(self.payload)

  def Body(self):
    return self.payload

  def _Key(self):
    return (self.payload,)

  def __repr__(self):
    return '<ModelMessage %d bytes>' % len(self.payload)


class ResultMessage(Message):
  """One inferred patch, tagged with the model version that produced it."""

  TYPE = RESULT

  def __init__(self, scan_id, frame_index, model_version, position, amplitude,
               phase):
    amplitude = np.asarray(amplitude, dtype=np.float32)
    phase = np.asarray(phase, dtype=np.float32)
    if amplitude.shape != phase.shape or amplitude.ndim != 2:
      raise base.ShapeMismatchError(
          'amplitude %s and phase %s must be equal square patches' %
          (amplitude.shape, phase.shape))
    self.scan_id = int(scan_id)
    self.frame_index = int(frame_index)
    self.model_version = int(model_version)
    self.position = (float(position[0]), float(position[1]))
    self.amplitude = amplitude
    self.phase = phase

  @property
  def patch_size(self):
    return self.amplitude.shape[0]

  def Body(self):
    head = _RESULT_HEAD.pack(self.scan_id, self.frame_index,
                             self.model_version, self.position[0],
                             self.position[1], self.patch_size)
    return (head + self.amplitude.astype(_FLOAT_DTYPE, copy=False).tobytes() +
            self.phase.astype(_FLOAT_DTYPE, copy=False).tobytes())

  def _Key(self):
    return (self.scan_id, self.frame_index, self.model_version, self.position,
            self.amplitude.tobytes(), self.phase.tobytes())

  def __repr__(self):
    return '<ResultMessage scan %d #%d v%d>' % (
        self.scan_id, self.frame_index, self.model_version)


class ScanBegin(Message):
  TYPE = SCAN_BEGIN

  def __init__(self, scan_id, n_points, frame_size, patch_size):
    self.scan_id = int(scan_id)
    self.n_points = int(n_points)
    self.frame_size = int(frame_size)
    self.patch_size = int(patch_size)

  def Body(self):
    return _SCAN_BEGIN.pack(self.scan_id, self.n_points, self.frame_size,
                            self.patch_size)

  def _Key(self):
    return (self.scan_id, self.n_points, self.frame_size, self.patch_size)

  def __repr__(self):
    return '<ScanBegin %d: %d points>' % (self.scan_id, self.n_points)


class ScanEnd(Message):
  TYPE = SCAN_END

  def __init__(self, scan_id):
    self.scan_id = int(scan_id)

  def Body(self):
    return _SCAN_END.pack(self.scan_id)

  def _Key(self):
    return (self.scan_id,)

  def __repr__(self):
    return '<ScanEnd %d>' % self.scan_id


class Heartbeat(Message):
  TYPE = HEARTBEAT

  def Body(self):
    return b''

  def _Key(self):
    return ()

  def __repr__(self):
    return '<Heartbeat>'


class Ack(Message):
  """Answer to a MODEL push."""

  TYPE = ACK

  def __init__(self, model_version, status=ACK_ACCEPTED, reason=''):
    self.model_version = int(model_version)
    self.status = int(status)
    self.reason = reason

  @property
  def accepted(self):
    return self.status == ACK_ACCEPTED

  def Body(self):
    return (_ACK_HEAD.pack(self.model_version, self.status) +
            self.reason.encode('utf-8'))

  def _Key(self):
    return (self.model_version, self.status, self.reason)

  def __repr__(self):
    return '<Ack v%d status %d %r>' % (self.model_version, self.status,
                                       self.reason)


def Encode(msg):
  """Header + body bytes for msg.

  Raises:
    PayloadTooLargeError: if the body exceeds MAX_PAYLOAD.
  """
  body = msg.Body()
  if len(body) > MAX_PAYLOAD:
    raise PayloadTooLargeError(
        '%s body of %d bytes exceeds %d' % (type(msg).__name__, len(body),
                                            MAX_PAYLOAD))
  return HEADER.pack(MAGIC, PROTOCOL_VERSION, msg.TYPE, 0, 0, len(body)) + body


def _Need(body, size, what):
  if len(body) < size:
    raise TruncatedMessageError(
        '%s body has %d bytes, needs %d' % (what, len(body), size))


def _Exact(body, size, what):
  _Need(body, size, what)
  if len(body) > size:
    raise TrailingBytesError(
        '%s body has %d bytes, layout ends at %d' % (what, len(body), size))


def _DecodeFrame(body):
  from ptychostream import simulator
  _Need(body, _FRAME_HEAD.size, 'FRAME')
  scan_id, index, y, x, exposure, n = _FRAME_HEAD.unpack_from(body)
  _Exact(body, _FRAME_HEAD.size + 2 * n * n, 'FRAME')
  counts = np.frombuffer(body, dtype=_COUNTS_DTYPE, count=n * n,
                         offset=_FRAME_HEAD.size).reshape(n, n)
  return FrameMessage(simulator.DiffractionFrame(
      scan_id, index, (y, x), exposure, counts.astype(np.uint16)))


def _DecodeResult(body):
  _Need(body, _RESULT_HEAD.size, 'RESULT')
  scan_id, index, version, y, x, k = _RESULT_HEAD.unpack_from(body)
  _Exact(body, _RESULT_HEAD.size + 8 * k * k, 'RESULT')
  start = _RESULT_HEAD.size
  amp = np.frombuffer(body, dtype=_FLOAT_DTYPE, count=k * k, offset=start)
  phase = np.frombuffer(body, dtype=_FLOAT_DTYPE, count=k * k,
                        offset=start + 4 * k * k)
  return ResultMessage(scan_id, index, version, (y, x),
                       amp.reshape(k, k).astype(np.float32),
                       phase.reshape(k, k).astype(np.float32))


def _DecodeScanBegin(body):
  _Exact(body, _SCAN_BEGIN.size, 'SCAN_BEGIN')
  return ScanBegin(*_SCAN_BEGIN.unpack_from(body))


def _DecodeScanEnd(body):
  _Exact(body, _SCAN_END.size, 'SCAN_END')
  return ScanEnd(*_SCAN_END.unpack_from(body))


def _DecodeHeartbeat(body):
  _Exact(body, 0, 'HEARTBEAT')
  return Heartbeat()


def _DecodeAck(body):
  _Need(body, _ACK_HEAD.size, 'ACK')
  version, status = _ACK_HEAD.unpack_from(body)
  try:
    reason = bytes(body[_ACK_HEAD.size:]).decode('utf-8')
  except UnicodeDecodeError as e:
    raise WireError('ACK reason is not UTF-8: %s' % e)
  return Ack(version, status, reason)


_DECODERS = {
    FRAME: _DecodeFrame,
    MODEL: lambda body: ModelMessage(body),
    RESULT: _DecodeResult,
    SCAN_BEGIN: _DecodeScanBegin,
    SCAN_END: _DecodeScanEnd,
    HEARTBEAT: _DecodeHeartbeat,
    ACK: _DecodeAck,
}


class Decoder(object):
  """Reassembles messages from an arbitrarily fragmented byte stream.

  One instance per connection. After the first error the decoder is
  unusable; every later Feed re-raises that error.
  """

  def __init__(self):
    self._buffer = bytearray()
    self._error = None

  def Pending(self):
    """Number of buffered bytes not yet forming a whole message."""
    return len(self._buffer)

  def Feed(self, data):
    """Append data; return the list of messages it completed, in order."""
    if self._error is not None:
      raise self._error
    self._buffer.extend(data)
    messages = []
    try:
      while True:
        msg = self._Next()
        if msg is None:
          break
        messages.append(msg)
    except WireError as e:
      self._error = e
      raise
    return messages

  def _Next(self):
    buf = self._buffer
    prefix = bytes(buf[:len(MAGIC)])
    if prefix != MAGIC[:len(prefix)]:
      raise BadMagicError('bad magic %r' % prefix)
    if len(buf) < HEADER_SIZE:
      return None
    _, version, msg_type, _, _, length = HEADER.unpack_from(buf)
    if version != PROTOCOL_VERSION:
      raise VersionError('unsupported protocol version %d' % version)
    if length > MAX_PAYLOAD:
      raise PayloadTooLargeError('payload length %d exceeds %d' %
                                 (length, MAX_PAYLOAD))
    decode = _DECODERS.get(msg_type)
    if decode is None:
      raise UnknownMessageError('unknown message type %d' % msg_type)
    end = HEADER_SIZE + length
    if len(buf) < end:
      return None
    body = bytes(buf[HEADER_SIZE:end])
    del buf[:end]
    return decode(body)


def DecodeAll(data):
  """Decode a complete buffer; trailing partial bytes are an error."""
  decoder = Decoder()
  messages = decoder.Feed(data)
  if decoder.Pending():
    raise TruncatedMessageError('%d trailing bytes' % decoder.Pending())
  return messages


def ReadMessages(sock, chunk_size=1 << 16):
  """Yield messages from sock until the peer closes it.

  Raises:
    TruncatedMessageError: if the stream ends inside a message.
    WireError: on any decode error.
  """
  decoder = Decoder()
  while True:
    data = sock.recv(chunk_size)
    if not data:
      break
    for msg in decoder.Feed(data):
      yield msg
  if decoder.Pending():
    raise TruncatedMessageError(
        'connection closed with %d bytes of a partial message' %
        decoder.Pending())


def SendMessage(sock, msg):
  sock.sendall(Encode(msg))


class ThroughputReport(object):
  """Loopback throughput as counted by the receiving side."""

  def __init__(self, messages, n_bytes, duration_s):
    self.messages = messages
    self.bytes = n_bytes
    self.duration_s = duration_s
    if duration_s > 0:
      self.msgs_per_s = messages / duration_s
      self.gbps = n_bytes * 8 / duration_s / 1e9
    else:
      self.msgs_per_s = 0.0
      self.gbps = 0.0

  @property
  def empty(self):
    return self.messages == 0

  def __repr__(self):
    return '<ThroughputReport %d msgs, %.1f msg/s, %.3f Gbps>' % (
        self.messages, self.msgs_per_s, self.gbps)


def ThroughputProbe(frame_size, duration_s, host='127.0.0.1'):
  """Blast FRAME messages of frame_size x frame_size over loopback.

  A drain server decodes and counts every message it receives; the report
  reflects what arrived, not what was offered.

  Args:
    frame_size: int, detector edge N
    duration_s: float; 0 returns an empty report without connecting
    host: str, loopback address to bind

  Returns:
    ThroughputReport
  """
  if duration_s <= 0:
    return ThroughputReport(0, 0, 0.0)
  from ptychostream import simulator

  counts = np.arange(frame_size * frame_size, dtype=np.uint64) % 4096
  frame = simulator.DiffractionFrame(
      0, 0, (0.0, 0.0), 1.0, counts.astype(np.uint16).reshape(
          frame_size, frame_size))
  payload = Encode(FrameMessage(frame))

  listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
  listener.bind((host, 0))
  listener.listen(1)
  tally = {'messages': 0, 'bytes': 0, 'first': None, 'last': None,
           'error': None}

  def Drain():
    conn, _ = listener.accept()
    decoder = Decoder()
    try:
      while True:
        data = conn.recv(1 << 20)
        if not data:
          break
        now = time.monotonic()
        if tally['first'] is None:
          tally['first'] = now
        n = len(decoder.Feed(data))
        if n:
          tally['messages'] += n
          tally['bytes'] += n * len(payload)
          tally['last'] = now
    except WireError as e:
      tally['error'] = e
    finally:
      conn.close()

  drain = threading.Thread(target=Drain, name='throughput-drain')
  drain.daemon = True
  drain.start()
  try:
    client = socket.create_connection(listener.getsockname())
    try:
      deadline = time.monotonic() + duration_s
      while time.monotonic() < deadline:
        client.sendall(payload)
    finally:
      client.close()
    drain.join()
  finally:
    listener.close()
  if tally['error'] is not None:
    raise tally['error']
  if not tally['messages']:
    return ThroughputReport(0, 0, 0.0)
  elapsed = max(tally['last'] - tally['first'], 1e-9)
  report = ThroughputReport(tally['messages'], tally['bytes'], elapsed)
  logging.info('Throughput probe N=%d: %r', frame_size, report)
  return report


class Listener(object):
  """Accepts TCP connections and hands each to handler(sock) on its own thread.

  Port 0 binds an ephemeral port; `endpoint` holds the bound address after
  Start(). Exceptions raised by handler are kept in `errors`.
  """

  def __init__(self, endpoint, handler, name='listener'):
    self._requested = endpoint
    self._handler = handler
    self._name = name
    self._sock = None
    self._thread = None
    self.errors = []

  @property
  def endpoint(self):
    return self._sock.getsockname()[:2]

  def Start(self):
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.bind(self._requested)
    sock.listen(8)
    self._sock = sock
    self._thread = threading.Thread(target=self._Accept,
                                    name=self._name + '-accept')
    self._thread.daemon = True
    self._thread.start()
    logging.info('%s listening on %s:%d', self._name, *self.endpoint)
    return self

  def _Accept(self):
    while True:
      try:
        conn, peer = self._sock.accept()
      except OSError:
        return
      logging.debug('%s: connection from %s:%d', self._name, *peer[:2])
      t = threading.Thread(target=self._Handle, args=(conn,),
                           name=self._name + '-conn')
      t.daemon = True
      t.start()

  def _Handle(self, conn):
    try:
      self._handler(conn)
    except Exception as e:  # pylint: disable=broad-except
      logging.error('%s handler failed: %s', self._name, e)
      self.errors.append(e)
    finally:
      conn.close()

  def Stop(self):
    if self._sock is not None:
      try:
        self._sock.shutdown(socket.SHUT_RDWR)
      except OSError:
        pass
      self._sock.close()
    if self._thread is not None:
      self._thread.join(timeout=5)
