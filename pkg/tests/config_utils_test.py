#!/usr/bin/env python

"""Tests for config file functions."""

from absl.testing import absltest

from ptychostream import base
from ptychostream import config_utils
from tests import test_util


TINY_FILE = test_util.TestDataPath('config/tiny.cfg')


class CheckKeysTest(absltest.TestCase):

  def setUp(self):
    self._keys = ['foo', 'bar', 'baz', 'quux']
    self._dict = dict((s, i) for i, s in enumerate(self._keys))

  def assertCheckSucceeds(self):
    config_utils.CheckKeys('test', self._dict, self._keys)

  def assertCheckRaises(self, error_cls):
    self.assertRaises(error_cls, config_utils.CheckKeys, 'test', self._dict,
                      self._keys)

  def testType(self):
    self._dict = []
    self.assertCheckRaises(TypeError)

  def testSucceeds(self):
    self.assertCheckSucceeds()

  def testSubset(self):
    del self._dict['baz']
    self.assertCheckSucceeds()

  def testFails(self):
    self._dict['badkey'] = 27
    self.assertCheckRaises(base.ConfigError)


class ConfigUtilsTest(absltest.TestCase):

  def testParse(self):
    self.assertDictEqual(
        {'key1': 'value1', 'key2': 'a = b'},
        config_utils.ParseKeyValueText('key1 = value1\nkey2=a = b\n'))

  def testComments(self):
    text = '# header\n\n  # indented\nkey = 1  # trailing\n'
    self.assertDictEqual({'key': '1'}, config_utils.ParseKeyValueText(text))

  def testMissingEquals(self):
    self.assertRaises(base.ConfigError, config_utils.ParseKeyValueText,
                      'just words')

  def testEmptyKey(self):
    self.assertRaises(base.ConfigError, config_utils.ParseKeyValueText,
                      '= 3')

  def testDuplicateKey(self):
    self.assertRaises(base.ConfigError, config_utils.ParseKeyValueText,
                      'a = 1\na = 2')

  def testReadConfigFile(self):
    settings = config_utils.ReadConfigFile(TINY_FILE)
    self.assertEqual('6.0', settings['beam_fwhm'])
    self.assertEqual('0.6, 0.3, 0.0', settings['overlap_grid'])
    self.assertLen(settings, 7)

  def testParseList(self):
    self.assertEqual([1.0, 2.5], config_utils.ParseList('x', '1, 2.5,'))
    self.assertEqual([4, 8], config_utils.ParseList('x', '4,8', int))
    self.assertRaises(base.ConfigError, config_utils.ParseList, 'x', '1,b')

  def testParseShape(self):
    self.assertEqual((128, 256), config_utils.ParseShape('c', '128x256'))
    self.assertEqual((4, 4), config_utils.ParseShape('c', '4X4'))
    for bad in ('128', 'ax4', '0x4'):
      self.assertRaises(base.ConfigError, config_utils.ParseShape, 'c', bad)


if __name__ == '__main__':
  absltest.main()
