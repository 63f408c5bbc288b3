#!/usr/bin/env python

"""Runs the whole streaming workflow on one machine over loopback TCP.

The simulated detector streams every scan twice: to the edge service, which
infers and stitches it, and to the frame ingest server, which hands finished
scans to the orchestrator. The orchestrator trains and pushes models to the
edge's model endpoint. Until the first model arrives the edge buffers frames.
"""

from absl import logging

from ptychostream import base
from ptychostream import core
from ptychostream import edge
from ptychostream import experiments
from ptychostream import image_io
from ptychostream import orchestrator
from ptychostream import simulator


LOOPBACK = ('127.0.0.1', 0)
ACTIONS_CSV_HEADER = ['scan_id', 'action', 'mode', 'gap', 'model_version']
LINE_PROFILE_CSV_HEADER = ['x', 'stitched_phase', 'epie_phase']
SCAN_TIMEOUT_S = 600.0


class PipelineSummary(object):
  """What one pipeline run did.

  Attributes:
    frames_streamed: int
    results_received: int
    models_pushed: list of int versions the edge acknowledged
    registry_versions: list of int
    actions: list of orchestrator.ActionRecord
    latency: edge.LatencyReport or None
    final_ssim: float or None, phase SSIM of the last scan's stitched canvas
      against its ePIE reconstruction
  """

  def __init__(self):
    self.frames_streamed = 0
    self.results_received = 0
    self.models_pushed = []
    self.registry_versions = []
    self.actions = []
    self.latency = None
    self.final_ssim = None

  def Lines(self):
    lines = [
        'frames_streamed: %d' % self.frames_streamed,
        'results_received: %d' % self.results_received,
        'models_pushed: %s' % ' '.join(str(v) for v in self.models_pushed),
        'registry_versions: %s' % ' '.join(
            str(v) for v in self.registry_versions),
        'actions: %s' % ' '.join(a.action for a in self.actions),
    ]
    if self.latency is not None:
      lines.append('latency_p50_us: %.1f' % self.latency.p50_us)
      lines.append('latency_p99_us: %.1f' % self.latency.p99_us)
    if self.final_ssim is not None:
      lines.append('final_phase_ssim: %.4f' % self.final_ssim)
    return lines

  def Write(self, path):
    with open(path, 'w') as f:
      f.write('\n'.join(self.Lines()) + '\n')
    return path


def _ActionRows(actions):
  return [[a.scan_id, a.action, a.mode, '' if a.gap is None else a.gap,
           a.model_version] for a in actions]


def RunPipeline(cfg, run):
  """Stream cfg.n_scans scans through edge and orchestrator.

  Returns:
    PipelineSummary
  """
  ui = run.ui
  probe = cfg.Probe()
  shape = cfg.ObjectShape()
  summary = PipelineSummary()
  registry = orchestrator.ModelRegistry(run.Path('registry', ''))
  service = edge.EdgeService(cfg.EdgeConfig(out_dir=run.Path('edge', '')))
  server = edge.EdgeServer(service, LOOPBACK, LOOPBACK).Start()
  pusher = orchestrator.ModelPusher(server.model_endpoint, base_delay_s=0.1,
                                    max_delay_s=2.0)
  orch = orchestrator.Orchestrator(
      cfg.OrchestratorConfig(corpus_dir=run.Path('corpus', '')), probe, shape,
      registry=registry, pusher=pusher).Start()
  ingest = orchestrator.FrameIngestServer(LOOPBACK, orch.Submit).Start()
  edge_sink = simulator.TcpSink(server.frame_endpoint)
  ingest_sink = simulator.TcpSink(ingest.endpoint)
  sink = simulator.FanoutSink([edge_sink, ingest_sink])
  last = None
  try:
    with ui.BeginIntermediateTask('pipeline', 'Streaming %d scans'
                                  % cfg.n_scans):
      for i in range(cfg.n_scans):
        with ui.BeginImmediateTask('scan', 'Scan %d' % i) as task:
          obj = cfg.Object(seed=cfg.object_seed + i)
          plan = cfg.Plan(scan_id=i)
          frames = simulator.SimulateScan(obj.field, probe, plan,
                                          cfg.photon_budget,
                                          seed=cfg.seed + i,
                                          exposure_ms=cfg.exposure_ms)
          report = simulator.RunScanStream(obj.field, probe, plan,
                                           cfg.photon_budget, cfg.rate_hz,
                                           sink, frames=frames,
                                           patch_size=cfg.k)
          if report.error:
            raise base.ServiceError(report.error)
          summary.frames_streamed += report.frames_sent
          if not ingest_sink.WaitForScanEnd(i, SCAN_TIMEOUT_S):
            raise base.ServiceError('ingest never finished scan %d' % i)
          orch.WaitForIdle(SCAN_TIMEOUT_S)
          if not edge_sink.WaitForScanEnd(i, SCAN_TIMEOUT_S):
            raise base.ServiceError('edge never finished scan %d' % i)
          action = orch.state.log[-1]
          task.SetResult('%s, registry at v%d' % (action.action,
                                                  registry.current_version))
          last = (plan, frames)
  finally:
    sink.Close()
    ingest.Stop()
    orch.Stop()
    server.Stop()

  summary.results_received = len(edge_sink.results)
  summary.models_pushed = list(pusher.pushed)
  summary.registry_versions = [e.version for e in registry.Entries()]
  summary.actions = list(orch.state.log)
  if service.recorder.frames:
    summary.latency = service.recorder.Report()
    run.Record(summary.latency.WriteCsv(run.Path('edge_latency.csv')))
  if last is not None:
    plan, frames = last
    recon = orch.reconstructions.get(plan.scan_id)
    if recon is None:
      recon, _ = experiments.ReconstructScan(cfg, probe, plan, frames)
    canvas = service.canvases.get(plan.scan_id)
    if canvas is not None:
      mask = canvas.Covered()
      stitched = canvas.Snapshot()[1]
      reference = recon.Phase()
      summary.final_ssim = core.PhaseScore(stitched, reference, mask)
      row = shape[0] // 2
      aligned = core.AlignPhaseImage(stitched, reference, mask)
      profile = zip(range(shape[1]), core.LineProfile(aligned, row),
                    core.LineProfile(reference, row))
      run.Record(image_io.WriteCsv(run.Path('line_profile.csv'),
                                   LINE_PROFILE_CSV_HEADER,
                                   [list(p) for p in profile]))
  run.Record(image_io.WriteCsv(run.Path('actions.csv'), ACTIONS_CSV_HEADER,
                               _ActionRows(summary.actions)))
  run.Record(summary.Write(run.Path('summary.txt')))
  run.Record(*service.dumped)
  run.Record(*[e.path for e in registry.Entries() if e.path])
  for line in summary.Lines():
    ui.Info(line)
  logging.info('Pipeline done: %d frames, %d results', summary.frames_streamed,
               summary.results_received)
  return summary
