#!/usr/bin/env python

"""Desk-scale experiments: overlap sweep, dose sweep, latency, learning curve.

Every experiment takes an ExperimentConfig and a PtychoRun; it reports
progress through run.ui, writes CSVs and PGM images under run.out_dir and
records each artifact in run.manifest.
"""

import time

from absl import logging
import numpy as np

from ptychostream import core
from ptychostream import edge
from ptychostream import epie
from ptychostream import image_io
from ptychostream import orchestrator
from ptychostream import simulator
from ptychostream.surrogate import model as model_lib
from ptychostream.surrogate import preprocess
from ptychostream.surrogate import training


OVERLAP_CSV_HEADER = ['overlap_ratio', 'n_points', 'dose_reduction',
                      'ssim_surrogate', 'ssim_epie']
DOSE_CSV_HEADER = ['strategy', 'factor', 'max_count', 'ssim']
BENCH_CSV_HEADER = edge.LATENCY_CSV_HEADER + ['preprocess_us']
TRAINING_CSV_HEADER = ['epoch', 'learning_rate', 'train_loss', 'val_loss']


class Scan(object):
  """A simulated scan and its ground-truth reconstruction.

  Attributes:
    obj: SyntheticObject
    plan: ScanPlan
    frames: list of DiffractionFrame
    recon: Reconstruction with its phase offset removed
    mask: bool image, pixels the scan illuminated
  """

  def __init__(self, obj, plan, frames, recon, mask):
    self.obj = obj
    self.plan = plan
    self.frames = frames
    self.recon = recon
    self.mask = mask

  def Pairs(self, patch_size):
    return epie.CropTrainingPairs(self.recon, self.plan, self.frames,
                                  patch_size)


def PinPhase(cfg, recon, plan):
  """Remove the reconstruction's phase offset; returns (recon, mask)."""
  mask = epie.IlluminationMask(recon.probe, plan, cfg.ObjectShape())
  return epie.RemovePhaseOffset(recon, mask), mask


def ReconstructScan(cfg, probe, plan, frames, seed=None):
  """Run ePIE from an all-ones object and pin its phase offset."""
  recon = epie.EpieReconstruct(frames, plan, probe,
                               np.ones(cfg.ObjectShape(), dtype=complex),
                               cfg.EpieConfig(seed))
  return PinPhase(cfg, recon, plan)


def SimulateAndReconstruct(cfg, probe, scan_id, object_seed, style=None,
                           overlap=None):
  obj = cfg.Object(style=style, seed=object_seed)
  plan = cfg.Plan(scan_id, overlap)
  frames = simulator.SimulateScan(obj.field, probe, plan, cfg.photon_budget,
                                  seed=cfg.seed + scan_id,
                                  exposure_ms=cfg.exposure_ms)
  recon, mask = ReconstructScan(cfg, probe, plan, frames, cfg.seed + scan_id)
  return Scan(obj, plan, frames, recon, mask)


def TrainSurrogate(cfg, pairs, scale_factor=1.0, model=None):
  """Train a fresh model (or continue model) on pairs."""
  if model is None:
    model = model_lib.BuildModel(cfg.frame_size, cfg.k, cfg.base_channels,
                                 seed=cfg.seed)
  best, report = training.Train(model, pairs,
                                cfg.TrainConfig(scale_factor=scale_factor))
  return best, report


def StitchInference(model, frames, shape, scale_factor=1.0, batch_size=16):
  """Infer every frame and stitch the patches onto a fresh canvas."""
  canvas = edge.StitchCanvas(*shape)
  for start in range(0, len(frames), batch_size):
    chunk = frames[start:start + batch_size]
    amplitude, phase = model_lib.Infer(model, chunk, scale_factor)
    for i, f in enumerate(chunk):
      canvas.Stitch(amplitude[i], phase[i], f.position)
  return canvas


def ScorePhase(phase, reference_phase, mask):
  return core.PhaseScore(phase, reference_phase, mask)


def TrainingScans(cfg, probe, ui, style=None):
  """Ground-truth scans of training objects distinct from the test object."""
  scans = []
  for i in range(cfg.training_scans):
    with ui.BeginImmediateTask('train_scan', 'Reconstructing training scan %d'
                               % i):
      scans.append(SimulateAndReconstruct(
          cfg, probe, scan_id=100 + i, object_seed=cfg.object_seed + 1 + i,
          style=style, overlap=cfg.dense_overlap))
  return scans


def CollectPairs(cfg, scans):
  pairs = []
  for s in scans:
    pairs.extend(s.Pairs(cfg.k))
  return pairs


def WriteImage(run, name, img):
  paths = image_io.WriteImage(run.Path(name), img)
  run.Record(*paths)


def WriteTrainingReport(path, report):
  rows = [[e, report.learning_rates[e], report.train_losses[e],
           report.val_losses[e]] for e in range(len(report.val_losses))]
  return image_io.WriteCsv(path, TRAINING_CSV_HEADER, rows)


def OverlapSweep(cfg, run):
  """Surrogate and ePIE accuracy as the scan is thinned out.

  ePIE runs for every overlap ratio are submitted to a job runner up front
  and collected after the surrogate has been scored.

  Returns:
    list of CSV rows
  """
  ui = run.ui
  probe = cfg.Probe()
  shape = cfg.ObjectShape()
  with ui.BeginIntermediateTask('overlap_sweep', 'Overlap sweep'):
    pairs = CollectPairs(cfg, TrainingScans(cfg, probe, ui))
    model, _ = TrainSurrogate(cfg, pairs)
    with ui.BeginImmediateTask('dense', 'Reconstructing dense test scan'):
      dense = SimulateAndReconstruct(cfg, probe, scan_id=0,
                                     object_seed=cfg.object_seed,
                                     overlap=cfg.dense_overlap)
    truth = dense.recon.Phase()
    WriteImage(run, 'overlap/ground_truth_phase.pgm', truth)
    by_position = dict((f.position, f) for f in dense.frames)
    runner = epie.EpieJobRunner()
    sweeps = []
    for ratio in cfg.overlap_grid:
      plan = simulator.ThinScan(dense.plan,
                                core.StepForOverlap(cfg.beam_fwhm, ratio))
      frames = [by_position[(float(y), float(x))] for y, x in plan.positions]
      job = runner.Submit(frames, plan, probe,
                          np.ones(shape, dtype=complex), cfg.EpieConfig())
      sweeps.append((ratio, plan, frames, job))
    rows = []
    try:
      for ratio, plan, frames, job in sweeps:
        with ui.BeginImmediateTask('overlap', 'Overlap %.2f (%d points)' %
                                   (ratio, plan.n_points)) as task:
          canvas = StitchInference(model, frames, shape, cfg.scale_factor)
          surrogate_phase = canvas.Snapshot()[1]
          ssim_surrogate = ScorePhase(surrogate_phase, truth, dense.mask)
          recon, _ = PinPhase(cfg, job.Result(), plan)
          ssim_epie = ScorePhase(recon.Phase(), truth, dense.mask)
          task.SetResult('surrogate %.3f, ePIE %.3f' % (ssim_surrogate,
                                                        ssim_epie))
        tag = '%.2f' % ratio
        WriteImage(run, 'overlap/surrogate_phase_%s.pgm' % tag,
                   surrogate_phase)
        WriteImage(run, 'overlap/epie_phase_%s.pgm' % tag, recon.Phase())
        rows.append([ratio, plan.n_points,
                     dense.plan.n_points / float(plan.n_points),
                     ssim_surrogate, ssim_epie])
    finally:
      runner.Shutdown()
    run.Record(image_io.WriteCsv(run.Path('overlap_sweep.csv'),
                                 OVERLAP_CSV_HEADER, rows))
  return rows


def _Attenuate(frames, factor, rng):
  return [f.WithCounts(preprocess.AttenuateCounts(f.counts, factor, rng),
                       exposure_ms=f.exposure_ms / factor) for f in frames]


def DoseSweep(cfg, run):
  """Low-dose robustness by input upscaling and by retraining.

  Returns:
    list of CSV rows
  """
  ui = run.ui
  probe = cfg.Probe()
  rng = np.random.default_rng(cfg.seed)
  with ui.BeginIntermediateTask('dose_sweep', 'Dose sweep'):
    train_pairs = CollectPairs(cfg, TrainingScans(cfg, probe, ui))
    model, _ = TrainSurrogate(cfg, train_pairs)
    test = SimulateAndReconstruct(cfg, probe, scan_id=0,
                                  object_seed=cfg.object_seed)
    truth = test.recon.Phase()
    shape = cfg.ObjectShape()

    def Score(m, frames, scale_factor):
      canvas = StitchInference(m, frames, shape, scale_factor)
      return ScorePhase(canvas.Snapshot()[1], truth, test.mask)

    def MaxCount(frames):
      return max(f.max_count for f in frames)

    rows = [['baseline', 1.0, MaxCount(test.frames),
             Score(model, test.frames, 1.0)]]
    for factor in cfg.upscale_factors:
      with ui.BeginImmediateTask('upscale', 'Upscale x%g' % factor) as task:
        frames = _Attenuate(test.frames, factor, rng)
        ssim = Score(model, frames, factor)
        task.SetResult('SSIM %.3f' % ssim)
      rows.append(['upscale', factor, MaxCount(frames), ssim])
    for factor in cfg.retrain_factors:
      with ui.BeginImmediateTask('retrain', 'Retrain at /%g' % factor) as task:
        low = [preprocess.AttenuateTrainingPair(p, factor, rng)
               for p in train_pairs]
        low_model, _ = TrainSurrogate(cfg, low)
        frames = _Attenuate(test.frames, factor, rng)
        ssim = Score(low_model, frames, 1.0)
        task.SetResult('SSIM %.3f, max count %d' % (ssim, MaxCount(frames)))
      rows.append(['retrain', factor, MaxCount(frames), ssim])
    run.Record(image_io.WriteCsv(run.Path('dose_sweep.csv'), DOSE_CSV_HEADER,
                                 rows))
  return rows


def BenchLatency(cfg, run, model=None, clock=time.perf_counter):
  """Time batched inference at each configured batch size.

  Preprocessing is timed on its own and excluded from the latency columns.

  Returns:
    list of CSV rows
  """
  ui = run.ui
  if model is None:
    model = model_lib.BuildModel(cfg.frame_size, cfg.k, cfg.base_channels,
                                 seed=cfg.seed)
  rng = np.random.default_rng(cfg.seed)
  rows = []
  with ui.BeginIntermediateTask('bench', 'Latency benchmark (%d runs each)'
                                % cfg.bench_runs):
    for batch_size in cfg.bench_batch_sizes:
      frames = [simulator.DiffractionFrame(
          0, i, (0.0, 0.0), 1.0,
          rng.poisson(50.0, (cfg.frame_size, cfg.frame_size)))
                for i in range(batch_size)]
      recorder = edge.LatencyRecorder()
      prep = []
      for _ in range(cfg.bench_runs):
        t0 = clock()
        batch = preprocess.PreprocessBatch(frames, cfg.scale_factor)
        t1 = clock()
        model.Forward(batch)
        t2 = clock()
        prep.append((t1 - t0) / batch_size)
        recorder.Record(batch_size, (t2 - t1) / batch_size, model.version)
      row = recorder.Report().rows[0]
      row.append(float(np.mean(prep)) * 1e6)
      ui.Info('batch %2d: %.1f +- %.1f us/frame' % (batch_size, row[1],
                                                    row[2]))
      rows.append(row)
    run.Record(image_io.WriteCsv(run.Path('bench_latency.csv'),
                                 BENCH_CSV_HEADER, rows))
  return rows


def LearningCurveExperiment(cfg, run):
  """Continual training over scans, scored on a seen and an unseen area.

  Each scan of a random-etch object is reconstructed, appended to the
  corpus, and the model retrained from its current weights; each version is
  registered. The seen area is another random-etch object, the unseen area a
  letters object.

  Returns:
    (probe sets, CSV rows)
  """
  ui = run.ui
  probe = cfg.Probe()
  registry = orchestrator.ModelRegistry(run.Path('registry', ''))
  corpus = orchestrator.TrainingCorpus(cfg.corpus_cap)
  shape = cfg.ObjectShape()
  with ui.BeginIntermediateTask('learning_curve', 'Learning curve'):
    with ui.BeginImmediateTask('probe_sets', 'Reconstructing probe areas'):
      seen = SimulateAndReconstruct(cfg, probe, scan_id=900,
                                    object_seed=cfg.object_seed + 900,
                                    style=simulator.RANDOM_ETCH)
      unseen = SimulateAndReconstruct(cfg, probe, scan_id=901,
                                      object_seed=cfg.object_seed + 901,
                                      style=simulator.LETTERS)
    areas = [('seen', seen), ('unseen', unseen)]
    probe_sets = [orchestrator.ProbeSet(name, s.Pairs(cfg.k))
                  for name, s in areas]
    model = None
    for i in range(cfg.n_scans):
      with ui.BeginImmediateTask('scan', 'Scan %d' % i) as task:
        scan = SimulateAndReconstruct(cfg, probe, scan_id=i,
                                      object_seed=cfg.object_seed + 1 + i,
                                      style=simulator.RANDOM_ETCH)
        corpus.Add(scan.Pairs(cfg.k))
        model, _ = TrainSurrogate(cfg, corpus.Pairs(), model=model)
        registry.Register(model, len(corpus))
        task.SetResult('v%d on %d pairs' % (model.version, len(corpus)))
      for name, s in areas:
        canvas = StitchInference(model, s.frames, shape, cfg.scale_factor)
        WriteImage(run, 'learning_curve/%s_phase_v%d.pgm' %
                    (name, model.version), canvas.Snapshot()[1])
    rows = orchestrator.LearningCurve(registry, probe_sets, cfg.scale_factor)
    run.Record(orchestrator.WriteLearningCurve(
        run.Path('learning_curve.csv'), probe_sets, rows))
    run.Record(*[e.path for e in registry.Entries()])
  logging.info('Learning curve: %d versions', len(rows))
  return probe_sets, rows
