#!/usr/bin/env python

"""The ptychostream subcommands.

Each command adds its dashed options to an argparse sub-parser and runs
against ptycho_app.RUN. Every command accepts --config and --out-dir; dashed
options that mirror config keys override them.
"""

import os
import threading

from absl import flags
from absl import logging

from ptychostream import base
from ptychostream import config
from ptychostream import config_utils
from ptychostream import epie
from ptychostream import experiments
from ptychostream import edge
from ptychostream import orchestrator
from ptychostream import pipeline
from ptychostream import ptycho_app
from ptychostream import simulator
from ptychostream.surrogate import serialization

FLAGS = flags.FLAGS


class Cmd(object):
  """A subcommand.

  Subclasses list the config keys they expose as dashed options in
  CONFIG_OPTIONS as (key, help) pairs and implement RunWithConfig.
  OPTION_ALIASES maps a key to extra option names that set it too.
  """

  CONFIG_OPTIONS = ()
  OPTION_ALIASES = {}

  def AddArguments(self, parser):
    parser.add_argument('--config', default=None,
                        help='key=value experiment config file')
    parser.add_argument('--out-dir', default=None,
                        help='Directory for every artifact (default: config '
                        'out_dir)')
    for key, help_text in self.CONFIG_OPTIONS:
      names = ('--' + key.replace('_', '-'),) + tuple(
          self.OPTION_ALIASES.get(key, ()))
      parser.add_argument(*names, dest=key, default=None, help=help_text)

  def LoadConfig(self, args):
    """The config file (or defaults) with dashed options applied."""
    if args.config:
      cfg = config.ExperimentConfig.FromFile(args.config)
    else:
      cfg = config.ExperimentConfig()
    overrides = {}
    for key, _ in self.CONFIG_OPTIONS:
      value = getattr(args, key)
      if value is not None:
        overrides[key] = config.KEYS[key][0](key, value)
    if FLAGS['seed'].present:
      overrides['seed'] = FLAGS.seed
    if overrides:
      cfg = cfg.Override(**overrides)
    cfg.Validate()
    return cfg

  def Run(self, args):
    cfg = self.LoadConfig(args)
    run = ptycho_app.Init(args.out_dir or cfg.out_dir, cfg.seed)
    run.Record(_WriteText(run.Path('config.txt'), cfg.Serialized()))
    try:
      self.RunWithConfig(cfg, args, run)
    finally:
      run.Finish()
    return 0

  def RunWithConfig(self, cfg, args, run):
    raise NotImplementedError


def _WriteText(path, text):
  with open(path, 'w') as f:
    f.write(text)
  return path


def _WaitForInterrupt(ui, what):
  ui.Info('%s; press Ctrl-C to stop' % what)
  try:
    threading.Event().wait()
  except KeyboardInterrupt:
    ui.Info('Shutting down')


class SimulateCmd(Cmd):
  """Simulate a scan and write it to a capture file or stream it."""

  CONFIG_OPTIONS = (
      ('n_points', 'Scan points'),
      ('beam_fwhm', 'Beam FWHM in pixels'),
      ('inner_fraction', 'Inner/outer FWHM ratio of the annular probe'),
      ('photon_budget', 'Expected photons per frame'),
      ('rate_hz', 'Frame rate when streaming (0 = unpaced)'),
  )

  def AddArguments(self, parser):
    Cmd.AddArguments(self, parser)
    parser.add_argument('--step', type=float, default=None,
                        help='Scan step in pixels (overrides the overlap)')
    parser.add_argument('--scan-id', type=int, default=0)
    parser.add_argument('--connect', default=None,
                        help='host:port to stream to instead of a file')
    parser.add_argument('--out', default=None,
                        help='Capture file to write (default: scan.frames '
                        'under --out-dir)')

  def RunWithConfig(self, cfg, args, run):
    overlap = None
    if args.step is not None:
      base.CheckPositive('step', args.step)
      overlap = 1.0 - args.step / cfg.beam_fwhm
    probe = cfg.Probe()
    obj = cfg.Object()
    plan = cfg.Plan(args.scan_id, overlap)
    with run.ui.BeginImmediateTask('simulate', 'Simulating %d frames'
                                   % plan.n_points):
      frames = simulator.SimulateScan(obj.field, probe, plan,
                                      cfg.photon_budget, seed=cfg.seed,
                                      exposure_ms=cfg.exposure_ms)
    experiments.WriteImage(run, 'object_amplitude.pgm', obj.Amplitude())
    experiments.WriteImage(run, 'object_phase.pgm', obj.Phase())
    if args.connect:
      sink = simulator.TcpSink(base.ParseEndpoint(args.connect))
      try:
        report = simulator.RunScanStream(obj.field, probe, plan,
                                         cfg.photon_budget, cfg.rate_hz, sink,
                                         frames=frames, patch_size=cfg.k)
        if not report.error:
          sink.WaitForScanEnd(plan.scan_id, pipeline.SCAN_TIMEOUT_S)
      finally:
        sink.Close()
      if report.error:
        raise base.ServiceError(report.error)
      run.ui.Info('Streamed %d frames at %.1f Hz' % (report.frames_sent,
                                                     report.achieved_rate_hz))
    else:
      if args.out:
        path = os.path.abspath(args.out)
        base.MakeDir(os.path.dirname(path))
      else:
        path = run.Path('scan.frames')
      run.Record(simulator.WriteCapture(path, frames))


class ReconstructCmd(Cmd):
  """Reconstruct a capture file with ePIE."""

  CONFIG_OPTIONS = (
      ('epie_iterations', 'ePIE iterations'),
      ('epie_alpha', 'Object step size'),
      ('epie_beta', 'Probe step size (0 freezes the probe)'),
  )
  OPTION_ALIASES = {
      'epie_iterations': ('--iters',),
      'epie_alpha': ('--alpha',),
      'epie_beta': ('--beta',),
  }

  def AddArguments(self, parser):
    Cmd.AddArguments(self, parser)
    parser.add_argument('--frames', required=True, help='Capture file')

  def RunWithConfig(self, cfg, args, run):
    frames = simulator.ReadCapture(args.frames)
    if not frames:
      raise base.InvalidArgumentError('%s holds no frames' % args.frames)
    plan = orchestrator.PlanFromFrames(frames[0].scan_id, frames)
    with run.ui.BeginImmediateTask(
        'epie', 'Reconstructing %d frames' % len(frames)) as task:
      recon, _ = experiments.ReconstructScan(cfg, cfg.Probe(), plan, frames)
      task.SetResult('error %.4g after %d iterations' %
                     (recon.final_error, recon.iterations_run))
    run.Record(*epie.SaveReconstruction(recon, run.out_dir))


class TrainCmd(Cmd):
  """Train a surrogate on a corpus directory or on simulated scans."""

  CONFIG_OPTIONS = (
      ('epochs', 'Training epochs'),
      ('base_lr', 'Cyclic learning rate floor'),
      ('max_lr', 'Cyclic learning rate peak'),
      ('base_channels', 'Encoder width of a new model'),
  )

  def AddArguments(self, parser):
    Cmd.AddArguments(self, parser)
    parser.add_argument('--pairs', default=None,
                        help='Corpus directory; default simulates '
                        'training_scans scans')
    parser.add_argument('--model', default=None,
                        help='Continue training this model file')
    parser.add_argument('--out', default='model.ptnn',
                        help='Model file name under --out-dir')

  def RunWithConfig(self, cfg, args, run):
    if args.pairs:
      pairs = orchestrator.TrainingCorpus(cfg.corpus_cap, args.pairs).Pairs()
    else:
      scans = experiments.TrainingScans(cfg, cfg.Probe(), run.ui)
      pairs = experiments.CollectPairs(cfg, scans)
    model = serialization.LoadModel(args.model) if args.model else None
    with run.ui.BeginImmediateTask(
        'train', 'Training on %d pairs' % len(pairs)) as task:
      best, report = experiments.TrainSurrogate(cfg, pairs, model=model)
      if report.best_epoch is not None:
        task.SetResult('best epoch %d, val loss %.5f' %
                       (report.best_epoch, report.best_val_loss))
    run.Record(serialization.SaveModel(best, run.Path(args.out)))
    run.Record(experiments.WriteTrainingReport(
        run.Path('training.csv'), report))


class EdgeCmd(Cmd):
  """Serve batched inference until interrupted."""

  CONFIG_OPTIONS = (
      ('batch_size', 'Frames per inference batch'),
      ('flush_ms', 'Partial batch flush timeout'),
      ('dump_every', 'Dump canvases every N stitched frames (0 = off)'),
      ('scale_factor', 'Count scale applied before normalization'),
  )

  def AddArguments(self, parser):
    Cmd.AddArguments(self, parser)
    parser.add_argument('--listen', default=None, help='Frame host:port')
    parser.add_argument('--model-listen', default=None,
                        help='Model push host:port')
    parser.add_argument('--canvas', default=None, help='Canvas HxW')
    parser.add_argument('--model', default=None, help='Initial model file')

  def RunWithConfig(self, cfg, args, run):
    frame_port, model_port = base.DefaultPorts()
    frame_endpoint = base.ParseEndpoint(args.listen or ':%d' % frame_port)
    model_endpoint = base.ParseEndpoint(args.model_listen or
                                        ':%d' % model_port)
    edge_config = cfg.EdgeConfig(out_dir=run.Path('canvas', ''))
    if args.canvas:
      edge_config.canvas_shape = config_utils.ParseShape('canvas', args.canvas)
    model = serialization.LoadModel(args.model) if args.model else None
    service = edge.EdgeService(edge_config, model)
    server = edge.EdgeServer(service, frame_endpoint, model_endpoint).Start()
    try:
      _WaitForInterrupt(run.ui, 'Edge serving frames on %s:%d, models on '
                        '%s:%d' % (server.frame_endpoint +
                                   server.model_endpoint))
    finally:
      server.Stop()
      for scan_id, canvas in sorted(service.canvases.items()):
        run.Record(*canvas.Dump(edge_config.out_dir, 'scan%d_exit' % scan_id))
      run.Record(*service.dumped)
      if service.recorder.frames:
        run.Record(service.recorder.Report().WriteCsv(
            run.Path('edge_latency.csv')))


class OrchestrateCmd(Cmd):
  """Reconstruct incoming scans and keep the edge model trained."""

  CONFIG_OPTIONS = (
      ('tolerance', 'Phase SSIM gap that triggers a retrain'),
      ('interval_s', 'Seconds between reconstructions while suspended'),
  )

  def AddArguments(self, parser):
    Cmd.AddArguments(self, parser)
    parser.add_argument('--frames-listen', default=None,
                        help='host:port receiving scan streams')
    parser.add_argument('--edge', default=None, help='Edge model host:port')
    parser.add_argument('--corpus-dir', default=None)

  def RunWithConfig(self, cfg, args, run):
    frame_port, model_port = base.DefaultPorts()
    listen = base.ParseEndpoint(args.frames_listen or
                                ':%d' % (frame_port + 2))
    pusher = orchestrator.ModelPusher(
        base.ParseEndpoint(args.edge or ':%d' % model_port))
    registry = orchestrator.ModelRegistry(run.Path('registry', ''))
    orch = orchestrator.Orchestrator(
        cfg.OrchestratorConfig(args.corpus_dir or run.Path('corpus', '')),
        cfg.Probe(), cfg.ObjectShape(), registry=registry,
        pusher=pusher).Start()
    ingest = orchestrator.FrameIngestServer(listen, orch.Submit).Start()
    try:
      _WaitForInterrupt(run.ui, 'Orchestrator listening on %s:%d'
                        % ingest.endpoint)
    finally:
      ingest.Stop()
      orch.Stop()
      orch.scheduler.WaitForIdle()
      run.Record(*[e.path for e in registry.Entries() if e.path])
      log = os.path.join(registry.directory, orchestrator.REGISTRY_LOG)
      if os.path.exists(log):
        run.Record(log)


class PipelineCmd(Cmd):
  """Run simulator, edge and orchestrator together over loopback."""

  CONFIG_OPTIONS = (
      ('n_scans', 'Scans to stream'),
      ('n_points', 'Points per scan'),
      ('rate_hz', 'Frame rate (0 = unpaced)'),
  )

  def RunWithConfig(self, cfg, args, run):
    pipeline.RunPipeline(cfg, run)


class OverlapSweepCmd(Cmd):
  """Surrogate vs ePIE accuracy as scan overlap drops."""

  CONFIG_OPTIONS = (
      ('overlap_grid', 'Comma-separated overlap ratios'),
      ('dense_overlap', 'Overlap of the dense reference scan'),
  )

  def RunWithConfig(self, cfg, args, run):
    experiments.OverlapSweep(cfg, run)


class DoseSweepCmd(Cmd):
  """Low-dose accuracy by upscaling and by retraining."""

  CONFIG_OPTIONS = (
      ('upscale_factors', 'Comma-separated attenuation factors, upscaled'),
      ('retrain_factors', 'Comma-separated attenuation factors, retrained'),
  )

  def RunWithConfig(self, cfg, args, run):
    experiments.DoseSweep(cfg, run)


class BenchLatencyCmd(Cmd):
  """Per-frame inference time for several batch sizes."""

  CONFIG_OPTIONS = (
      ('bench_batch_sizes', 'Comma-separated batch sizes'),
      ('bench_runs', 'Timed runs per batch size'),
      ('base_channels', 'Width of the benchmark model'),
  )

  def AddArguments(self, parser):
    Cmd.AddArguments(self, parser)
    parser.add_argument('--model', default=None,
                        help='Model file (default: a fresh model)')

  def RunWithConfig(self, cfg, args, run):
    model = serialization.LoadModel(args.model) if args.model else None
    experiments.BenchLatency(cfg, run, model)


class LearningCurveCmd(Cmd):
  """Probe-area MSE as the training corpus grows."""

  CONFIG_OPTIONS = (
      ('n_scans', 'Training scans in the schedule'),
  )

  def RunWithConfig(self, cfg, args, run):
    experiments.LearningCurveExperiment(cfg, run)


COMMANDS = {
    'simulate': SimulateCmd,
    'reconstruct': ReconstructCmd,
    'train': TrainCmd,
    'edge': EdgeCmd,
    'orchestrate': OrchestrateCmd,
    'pipeline': PipelineCmd,
    'overlap-sweep': OverlapSweepCmd,
    'dose-sweep': DoseSweepCmd,
    'bench-latency': BenchLatencyCmd,
    'learning-curve': LearningCurveCmd,
}


def RunCommand(name, args):
  logging.info('Running %s', name)
  return COMMANDS[name]().Run(args)
