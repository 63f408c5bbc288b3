"""pytest wiring: absltest.main() normally parses absl flags; do it here."""

from absl import flags


def pytest_configure(config):
  if not flags.FLAGS.is_parsed():
    flags.FLAGS.mark_as_parsed()
