#!/usr/bin/env python

"""Utilities for handling ptychostream config files.

Config files are plain text, one `key = value` per line. Blank lines and
lines starting with '#' are ignored, as is anything after a ' #' on a line.
"""

from ptychostream import base


def CheckKeys(name, config_dict, allowed):
  """Check that the given dict only contains allowed keys.

  Args:
    name: The name of this config, for use in error messages.
    config_dict: A dict of parsed settings.
    allowed: A sequence of allowed keys.

  Raises:
    TypeError: if config_dict is not a dict.
    ConfigError: if keys other than the allowed keys are found.
  """
  if not isinstance(config_dict, dict):
    raise TypeError('Expected dict, got %s (type: %s)' % (config_dict,
                                                          type(config_dict)))
  allowed = set(allowed)
  unknown = sorted(k for k in config_dict if k not in allowed)
  if unknown:
    raise base.ConfigError('Unknown key(s) in %s: %r' % (name, unknown))


def _StripComment(line):
  if line.lstrip().startswith('#'):
    return ''
  cut = line.find(' #')
  return line if cut == -1 else line[:cut]


def ParseKeyValueText(config_text, name='config'):
  """Parse key=value text into a dict of str -> str.

  Raises:
    ConfigError: on a line without '=', an empty key, or a repeated key.
  """
  settings = {}
  for lineno, raw in enumerate(config_text.splitlines(), 1):
    line = _StripComment(raw).strip()
    if not line:
      continue
    key, sep, value = line.partition('=')
    key = key.strip()
    if not sep or not key:
      raise base.ConfigError('%s:%d: expected key = value, got %r' %
                             (name, lineno, raw))
    if key in settings:
      raise base.ConfigError('%s:%d: duplicate key %r' % (name, lineno, key))
    settings[key] = value.strip()
  return settings


def ReadConfigFile(filename):
  """Read a key=value config file.

  Args:
    filename: The filename.

  Returns:
    dict of str -> str
  """
  with open(filename) as f:
    return ParseKeyValueText(f.read(), name=filename)


def ParseList(name, text, convert=float):
  """Parse a comma-separated list, converting each item."""
  items = [t.strip() for t in text.split(',') if t.strip()]
  try:
    return [convert(t) for t in items]
  except ValueError as e:
    raise base.ConfigError('%s: bad list %r (%s)' % (name, text, e))


def ParseShape(name, text):
  """'HxW' -> (H, W)."""
  h, sep, w = text.lower().partition('x')
  try:
    shape = (int(h), int(w))
  except ValueError:
    raise base.ConfigError('%s: expected HxW, got %r' % (name, text))
  if not sep or min(shape) <= 0:
    raise base.ConfigError('%s: expected HxW, got %r' % (name, text))
  return shape
