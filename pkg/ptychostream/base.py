#!/usr/bin/env python

"""Errors, constants and small utilities shared by every ptychostream module."""

import errno
import os

from absl import flags

FLAGS = flags.FLAGS

flags.DEFINE_integer('seed', 0, 'Global random seed for every subcommand.')


# Default TCP ports. The model/control port is always frame port + 1.
DEFAULT_FRAME_PORT = 48620
PORT_ENV_VAR = 'PTYCHOSTREAM_PORT'

# Detector counts are 16-bit.
MAX_COUNT = 65535


class Error(Exception):
  """Base class for ptychostream exceptions."""


class InvalidArgumentError(Error, ValueError):
  """An argument was outside the domain an operation accepts."""


class ShapeMismatchError(Error, ValueError):
  """Two arrays that must share a shape do not."""


class ConfigError(Error):
  """A configuration file or flag was invalid."""


class ServiceError(Error):
  """A background service failed."""


class EmptyReportError(Error):
  """A report was requested before any data was recorded."""


def DefaultPorts():
  """Return (frame_port, model_port), honoring PTYCHOSTREAM_PORT.

  Raises:
    ConfigError: if the environment variable is not a valid port.
  """
  value = os.environ.get(PORT_ENV_VAR)
  if not value:
    return DEFAULT_FRAME_PORT, DEFAULT_FRAME_PORT + 1
  try:
    port = int(value)
  except ValueError:
    raise ConfigError('%s must be an integer, got %r' % (PORT_ENV_VAR, value))
  if not 0 < port < 65535:
    raise ConfigError('%s out of range: %d' % (PORT_ENV_VAR, port))
  return port, port + 1


def ParseEndpoint(text):
  """Split 'host:port' into (host, port).

  Args:
    text: str, e.g. '127.0.0.1:48620' or ':48620' (host defaults to loopback)

  Returns:
    (str, int)

  Raises:
    ConfigError: if text is not a host:port pair.
  """
  host, sep, port = text.rpartition(':')
  if not sep:
    raise ConfigError('Expected host:port, got %r' % text)
  try:
    port = int(port)
  except ValueError:
    raise ConfigError('Bad port in endpoint %r' % text)
  return host or '127.0.0.1', port


def MakeDir(path):
  """Make dir, succeed if it already exists."""
  try:
    os.makedirs(path)
  except OSError as e:
    if e.errno != errno.EEXIST:
      raise


def CheckPositive(name, value):
  """Raise InvalidArgumentError unless value > 0."""
  if not value > 0:
    raise InvalidArgumentError('%s must be positive, got %r' % (name, value))
