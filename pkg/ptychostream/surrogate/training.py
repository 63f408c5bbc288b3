#!/usr/bin/env python

"""Supervised training of the surrogate on (frame, amplitude, phase) pairs."""

from absl import logging
import numpy as np

from ptychostream import base
from ptychostream.surrogate import optim
from ptychostream.surrogate import preprocess


MIN_PAIRS = 10


class TrainingDivergedError(base.Error):
  """The loss went non-finite; `snapshot` is the last finite model."""

  def __init__(self, message, snapshot):
    super(TrainingDivergedError, self).__init__(message)
    self.snapshot = snapshot


class TrainConfig(object):
  """Training hyperparameters."""

  def __init__(self, epochs=50, base_lr=1e-4, max_lr=5e-4,
               cycle_length_epochs=10, batch_size=32, beta1=0.9, beta2=0.999,
               adam_epsilon=1e-8, val_fraction=0.10, seed=0, scale_factor=1.0):
    if epochs < 0:
      raise base.InvalidArgumentError('epochs must be >= 0, got %r' % epochs)
    if not 0 < val_fraction < 1:
      raise base.InvalidArgumentError(
          'val_fraction must be in (0, 1), got %r' % val_fraction)
    if max_lr < base_lr:
      raise base.InvalidArgumentError(
          'max_lr %r is below base_lr %r' % (max_lr, base_lr))
    base.CheckPositive('batch_size', batch_size)
    base.CheckPositive('cycle_length_epochs', cycle_length_epochs)
    self.epochs = int(epochs)
    self.base_lr = float(base_lr)
    self.max_lr = float(max_lr)
    self.cycle_length_epochs = cycle_length_epochs
    self.batch_size = int(batch_size)
    self.beta1 = beta1
    self.beta2 = beta2
    self.adam_epsilon = adam_epsilon
    self.val_fraction = float(val_fraction)
    self.seed = int(seed)
    self.scale_factor = float(scale_factor)

  def LearningRate(self, epoch):
    return optim.CyclicLearningRate(epoch, self.base_lr, self.max_lr,
                                    self.cycle_length_epochs)


class TrainingReport(object):
  """Per-epoch losses of one training run.

  Attributes:
    train_losses: list of float, mean batch loss per epoch
    val_losses: list of float, validation loss per epoch
    learning_rates: list of float
    best_epoch: int or None
    n_train: int
    n_val: int
  """

  def __init__(self, n_train, n_val):
    self.train_losses = []
    self.val_losses = []
    self.learning_rates = []
    self.best_epoch = None
    self.n_train = n_train
    self.n_val = n_val

  @property
  def best_val_loss(self):
    if self.best_epoch is None:
      return None
    return self.val_losses[self.best_epoch]


def Loss(amplitude, phase, target_amplitude, target_phase):
  """MAE of amplitude plus MAE of phase, with the output gradients.

  Returns:
    (loss, d_amplitude, d_phase)
  """
  da = amplitude - target_amplitude
  dp = phase - target_phase
  loss = float(np.mean(np.abs(da), dtype=np.float64) +
               np.mean(np.abs(dp), dtype=np.float64))
  return (loss, (np.sign(da) / da.size).astype(amplitude.dtype),
          (np.sign(dp) / dp.size).astype(phase.dtype))


def Targets(pairs):
  """Stack pair labels into (B, 1, K, K) float32 arrays."""
  amplitude = np.stack([p.amplitude for p in pairs])[:, None]
  phase = np.stack([p.phase for p in pairs])[:, None]
  return amplitude.astype(np.float32), phase.astype(np.float32)


def TrainStep(model, batch, target_amplitude, target_phase, optimizer, lr):
  """One forward/backward pass and ADAM update, in place.

  Returns:
    float, the loss before the update
  """
  amplitude, phase, caches = model.ForwardWithCaches(batch)
  if amplitude.shape != target_amplitude.shape:
    raise base.ShapeMismatchError('output %s vs target %s' %
                                  (amplitude.shape, target_amplitude.shape))
  loss, d_amp, d_phase = Loss(amplitude, phase, target_amplitude, target_phase)
  if not np.isfinite(loss):
    return loss
  grads = model.Backward(d_amp, d_phase, caches)
  optimizer.Step(model.Params(), grads, lr)
  return loss


def Evaluate(model, pairs, scale_factor=1.0, batch_size=32):
  """Mean per-pair loss of model on pairs."""
  total = 0.0
  for start in range(0, len(pairs), batch_size):
    chunk = pairs[start:start + batch_size]
    batch = preprocess.PreprocessBatch([p.frame for p in chunk], scale_factor)
    amplitude, phase = model.Forward(batch)
    target_amplitude, target_phase = Targets(chunk)
    loss, _, _ = Loss(amplitude, phase, target_amplitude, target_phase)
    total += loss * len(chunk)
  return total / len(pairs)


def SplitPairs(pairs, val_fraction, seed):
  """Seeded shuffle into (train, validation); both sides non-empty."""
  n = len(pairs)
  n_val = int(round(n * val_fraction))
  n_val = min(max(n_val, 1), n - 1)
  order = np.random.default_rng(seed).permutation(n)
  val = [pairs[i] for i in order[:n_val]]
  train = [pairs[i] for i in order[n_val:]]
  return train, val


def Train(model, pairs, config=None):
  """Train a clone of model and return the best validation snapshot.

  Args:
    model: SurrogateModel, left untouched
    pairs: list of TrainingPair
    config: TrainConfig

  Returns:
    (best model with version + 1, TrainingReport). With epochs == 0 the
    input model comes back unchanged.

  Raises:
    InvalidArgumentError: with fewer than MIN_PAIRS pairs.
    TrainingDivergedError: if a loss goes non-finite.
  """
  config = config or TrainConfig()
  if len(pairs) < MIN_PAIRS:
    raise base.InvalidArgumentError(
        'need at least %d pairs to train, got %d' % (MIN_PAIRS, len(pairs)))
  train, val = SplitPairs(pairs, config.val_fraction, config.seed)
  report = TrainingReport(len(train), len(val))
  if config.epochs == 0:
    return model, report

  work = model.Clone()
  optimizer = optim.Adam(work.Params(), config.beta1, config.beta2,
                         config.adam_epsilon)
  inputs = preprocess.PreprocessBatch([p.frame for p in train],
                                      config.scale_factor)
  target_amplitude, target_phase = Targets(train)
  best = None
  last_finite = model
  for epoch in range(config.epochs):
    lr = config.LearningRate(epoch)
    order = np.random.default_rng([config.seed, epoch]).permutation(len(train))
    losses = []
    for start in range(0, len(train), config.batch_size):
      idx = order[start:start + config.batch_size]
      loss = TrainStep(work, inputs[idx], target_amplitude[idx],
                       target_phase[idx], optimizer, lr)
      if not np.isfinite(loss):
        raise TrainingDivergedError(
            'non-finite loss at epoch %d' % epoch,
            best if best is not None else last_finite)
      losses.append(loss)
    val_loss = Evaluate(work, val, config.scale_factor, config.batch_size)
    if not np.isfinite(val_loss):
      raise TrainingDivergedError(
          'non-finite validation loss at epoch %d' % epoch,
          best if best is not None else last_finite)
    report.train_losses.append(float(np.mean(losses)))
    report.val_losses.append(val_loss)
    report.learning_rates.append(lr)
    if best is None or val_loss < report.best_val_loss:
      report.best_epoch = epoch
      best = work.Clone(version=model.version + 1)
    logging.debug('epoch %d: lr %.3g train %.5f val %.5f', epoch, lr,
                  report.train_losses[-1], val_loss)

  best.trained_on_pairs = len(pairs)
  best.val_loss = report.best_val_loss
  logging.info('Trained v%d on %d pairs: best val loss %.5f at epoch %d',
               best.version, len(pairs), best.val_loss, report.best_epoch)
  return best, report
