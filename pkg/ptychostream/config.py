#!/usr/bin/env python

"""Experiment configuration.

An ExperimentConfig is read from a key=value file (see config_utils) and
fully determines, together with the seed, every experiment the command line
runs. It also builds the per-module configuration objects.
"""

import numpy as np

from ptychostream import base
from ptychostream import config_utils
from ptychostream import core
from ptychostream import edge
from ptychostream import epie
from ptychostream import orchestrator
from ptychostream import simulator
from ptychostream.surrogate import training


def _Int(name, text):
  try:
    return int(text)
  except ValueError:
    raise base.ConfigError('%s: expected an integer, got %r' % (name, text))


def _Float(name, text):
  try:
    return float(text)
  except ValueError:
    raise base.ConfigError('%s: expected a number, got %r' % (name, text))


def _Str(name, text):
  return text


def _Floats(name, text):
  return config_utils.ParseList(name, text, float)


def _Ints(name, text):
  return config_utils.ParseList(name, text, int)


# name -> (parser, default)
KEYS = {
    # Object
    'object_size': (_Int, 256),
    'object_style': (_Str, simulator.RANDOM_ETCH),
    'object_seed': (_Int, 0),
    'a_min': (_Float, simulator.DEFAULT_A_MIN),
    'phi_max': (_Float, simulator.DEFAULT_PHI_MAX),
    # Probe and detector
    'probe_window': (_Int, 64),
    'beam_fwhm': (_Float, 20.0),
    'inner_fraction': (_Float, 0.5),
    'phase_curvature': (_Float, float(np.pi)),
    'photon_budget': (_Float, 1e6),
    'exposure_ms': (_Float, 1.0),
    # Scans
    'overlap': (_Float, 0.8),
    'n_points': (_Int, 400),
    'n_scans': (_Int, 3),
    'rate_hz': (_Float, 0.0),
    # ePIE
    'epie_iterations': (_Int, 100),
    'epie_alpha': (_Float, 1.0),
    'epie_beta': (_Float, 1.0),
    'epie_probe_update_start': (_Int, 5),
    # Surrogate
    'patch_size': (_Int, 0),
    'base_channels': (_Int, 32),
    'epochs': (_Int, 50),
    'base_lr': (_Float, 1e-4),
    'max_lr': (_Float, 5e-4),
    'cycle_length': (_Int, 10),
    'train_batch_size': (_Int, 32),
    'val_fraction': (_Float, 0.10),
    # Edge
    'batch_size': (_Int, 8),
    'flush_ms': (_Float, 10.0),
    'scale_factor': (_Float, 1.0),
    'dump_every': (_Int, 0),
    # Orchestrator
    'tolerance': (_Float, 0.10),
    'interval_s': (_Float, 120.0),
    'corpus_cap': (_Int, 120000),
    # Experiments
    'dense_overlap': (_Float, 0.88),
    'overlap_grid': (_Floats, [0.8, 0.6, 0.5, 0.3, 0.0]),
    'training_scans': (_Int, 2),
    'upscale_factors': (_Floats, [10.0, 100.0]),
    'retrain_factors': (_Floats, [10.0, 100.0, 1000.0, 10000.0]),
    'bench_batch_sizes': (_Ints, [1, 2, 4, 8, 16]),
    'bench_runs': (_Int, 50),
    'out_dir': (_Str, 'ptychostream_out'),
    'seed': (_Int, 0),
}


class ExperimentConfig(object):
  """Typed settings with defaults; every key is an attribute."""

  def __init__(self, **settings):
    config_utils.CheckKeys('experiment config', settings, KEYS)
    for name, (_, default) in KEYS.items():
      setattr(self, name, settings.get(name, default))
    self.Validate()

  @classmethod
  def FromRaw(cls, raw, name='config'):
    """Build from a dict of str -> str as config_utils parses it."""
    config_utils.CheckKeys(name, raw, KEYS)
    return cls(**dict((k, KEYS[k][0](k, v)) for k, v in raw.items()))

  @classmethod
  def FromText(cls, text, name='config'):
    return cls.FromRaw(config_utils.ParseKeyValueText(text, name), name)

  @classmethod
  def FromFile(cls, filename):
    return cls.FromRaw(config_utils.ReadConfigFile(filename), filename)

  def Override(self, **overrides):
    """A copy with non-None overrides applied."""
    settings = self.Settings()
    settings.update((k, v) for k, v in overrides.items() if v is not None)
    return ExperimentConfig(**settings)

  def Settings(self):
    return dict((name, getattr(self, name)) for name in KEYS)

  def Serialized(self):
    """key = value text that FromText reads back to an equal config."""
    lines = []
    for name in sorted(KEYS):
      value = getattr(self, name)
      if isinstance(value, list):
        value = ','.join(repr(v) for v in value)
      elif isinstance(value, float):
        value = repr(value)
      lines.append('%s = %s' % (name, value))
    return '\n'.join(lines) + '\n'

  def __eq__(self, other):
    return (isinstance(other, ExperimentConfig) and
            self.Settings() == other.Settings())

  def __ne__(self, other):
    return not self == other

  def Validate(self):
    if self.object_style not in simulator.OBJECT_STYLES:
      raise base.ConfigError('object_style must be one of %s, got %r' %
                             (simulator.OBJECT_STYLES, self.object_style))
    if self.object_size < 4 * self.probe_window:
      raise base.ConfigError('object_size %d is below 4 x probe_window %d' %
                             (self.object_size, self.probe_window))
    if self.probe_window % 8:
      raise base.ConfigError('probe_window must be a multiple of 8')
    if not 0 <= self.overlap < 1 or not 0 <= self.dense_overlap < 1:
      raise base.ConfigError('overlap ratios must be in [0, 1)')
    for r in self.overlap_grid:
      if not 0 <= r < 1:
        raise base.ConfigError('overlap_grid entry %r outside [0, 1)' % r)
    for f in self.upscale_factors + self.retrain_factors:
      if f < 1:
        raise base.ConfigError('dose factors must be >= 1, got %r' % f)

  # Derived values and per-module configs.

  @property
  def frame_size(self):
    return self.probe_window

  @property
  def k(self):
    return self.patch_size or self.probe_window // 2

  def ObjectShape(self):
    return (self.object_size, self.object_size)

  def ProbeSpec(self):
    return simulator.ProbeSpec(self.probe_window, self.beam_fwhm,
                               self.inner_fraction, self.phase_curvature)

  def Probe(self):
    return simulator.MakeProbe(self.ProbeSpec())

  def Object(self, style=None, seed=None):
    return simulator.SynthObject(
        self.object_size, self.object_size, style or self.object_style,
        self.object_seed if seed is None else seed, self.a_min, self.phi_max,
        probe_window=self.probe_window)

  def ScanRadius(self):
    """Largest spiral radius whose probe windows stay inside the object."""
    return self.object_size / 2.0 - self.probe_window / 2.0 - 1

  def Plan(self, scan_id=0, overlap=None, max_points=None):
    """A centered spiral at the given overlap ratio."""
    ratio = self.overlap if overlap is None else overlap
    step = core.StepForOverlap(self.beam_fwhm, ratio)
    plan = simulator.FitSpiralScan(
        step, self.ScanRadius(), scan_id,
        max_points=max_points or self.n_points, beam_fwhm=self.beam_fwhm)
    return simulator.CenterPlanOn(plan, self.ObjectShape())

  def EpieConfig(self, seed=None):
    return epie.EpieConfig(
        alpha=self.epie_alpha, beta=self.epie_beta,
        n_iterations=self.epie_iterations,
        probe_update_start=self.epie_probe_update_start,
        shuffle_seed=self.seed if seed is None else seed)

  def TrainConfig(self, epochs=None, scale_factor=1.0):
    return training.TrainConfig(
        epochs=self.epochs if epochs is None else epochs,
        base_lr=self.base_lr, max_lr=self.max_lr,
        cycle_length_epochs=self.cycle_length,
        batch_size=self.train_batch_size, val_fraction=self.val_fraction,
        seed=self.seed, scale_factor=scale_factor)

  def BatcherConfig(self):
    return edge.BatcherConfig(self.batch_size, self.flush_ms / 1000.0,
                              self.scale_factor)

  def EdgeConfig(self, out_dir=None):
    return edge.EdgeConfig(self.BatcherConfig(),
                           canvas_shape=self.ObjectShape(),
                           dump_every=self.dump_every, out_dir=out_dir)

  def OrchestratorConfig(self, corpus_dir=None):
    return orchestrator.OrchestratorConfig(
        mismatch_tolerance=self.tolerance,
        suspended_interval_s=self.interval_s, corpus_dir=corpus_dir,
        corpus_cap=self.corpus_cap, validation_fraction=self.val_fraction,
        patch_size=self.k, base_channels=self.base_channels,
        train=self.TrainConfig(), epie_config=self.EpieConfig(),
        seed=self.seed)
