#!/usr/bin/env python

"""Stub entry points for ptychostream programs."""

from absl import app


def RunPtychostream():
  from ptychostream import ptychostream_main
  app.run(ptychostream_main.main, flags_parser=ptychostream_main.ParseFlags)
