#!/usr/bin/env python

"""Main file for the ptychostream command line."""

from absl import app
from absl.flags import argparse_flags

from ptychostream import commands


def ParseFlags(argv):
  """Parse absl flags and the subcommand with its options."""
  parser = argparse_flags.ArgumentParser(
      description='Streaming ptychography with a continually trained '
      'surrogate.')
  subparsers = parser.add_subparsers(dest='command', metavar='COMMAND')
  subparsers.required = True
  for name in sorted(commands.COMMANDS):
    cmd = commands.COMMANDS[name]
    cmd().AddArguments(subparsers.add_parser(name, help=cmd.__doc__))
  return parser.parse_args(argv[1:])


def main(args):
  return commands.RunCommand(args.command, args)


if __name__ == '__main__':
  app.run(main, flags_parser=ParseFlags)
