# Licensed under a 3-clause BSD style license - see LICENSE.rst
# -*- coding: utf-8 -*-
"""Test advText.cli.
"""
import os
import json
import unittest
from unittest.mock import patch
from tempfile import mkdtemp
from shutil import rmtree
import importlib.resources as ir

from ..cli import get_options, main
from ..selftest import CheckResult


class TestCli(unittest.TestCase):
    """Test advText.cli.
    """
    @classmethod
    def setUpClass(cls):
        cls.config = str(ir.files('advText.test') / 't' / 'attack.ini')
        cls.dataset = str(ir.files('advText.test') / 't' / 'three.jsonl')

    @classmethod
    def tearDownClass(cls):
        pass

    def setUp(self):
        self.data_dir = mkdtemp()

    def tearDown(self):
        rmtree(self.data_dir)

    @patch('sys.argv', ['adv_text', '-v', 'attack', '-d', 'data.jsonl', '-o', 'out', '-n', '5', '-p', '2'])
    def test_get_options(self):
        """Test advText.cli.get_options.
        """
        options = get_options()
        self.assertEqual(options.command, 'attack')
        self.assertTrue(options.verbose)
        self.assertEqual(options.dataset, 'data.jsonl')
        self.assertEqual(options.victim, 'inproc:tiny')
        self.assertEqual(options.n_samples, 5)
        self.assertEqual(options.parallel, 2)
        self.assertIsNone(options.seed)

    @patch('sys.argv', ['adv_text', 'selftest', '--scale', '0.5'])
    def test_get_options_selftest(self):
        """Test advText.cli.get_options for selftest.
        """
        options = get_options()
        self.assertEqual(options.command, 'selftest')
        self.assertEqual(options.scale, 0.5)
        self.assertEqual(options.seed, 0)

    def test_selftest(self):
        """Test the selftest subcommand.
        """
        passing = [CheckResult('gradient oracle', True, 'fine', 0.1)]
        failing = passing + [CheckResult('calibration', False, 'ASR 10.0%', 0.2)]
        with patch('sys.argv', ['adv_text', 'selftest', '--scale', '0.01']):
            with patch('advText.cli.run_checks', return_value=passing) as checks:
                with patch('builtins.print') as p:
                    self.assertEqual(main(), 0)
            checks.assert_called_once_with(scale=0.01, seed=0)
            p.assert_called_once_with('PASS gradient oracle: fine (0.1 s)')
            with patch('advText.cli.run_checks', return_value=failing):
                with patch('builtins.print'):
                    self.assertEqual(main(), 1)

    def test_bad_config(self):
        """Test main with a missing or invalid configuration file.
        """
        with patch('sys.argv', ['adv_text', '-c', os.path.join(self.data_dir, 'missing.ini'), 'selftest']):
            self.assertEqual(main(), 1)
        bad = str(ir.files('advText.test') / 't' / 'unknown_key.ini')
        with patch('sys.argv', ['adv_text', '-c', bad, 'selftest']):
            self.assertEqual(main(), 1)

    def test_attack_and_report(self):
        """Test the attack, report and screen subcommands.
        """
        out = os.path.join(self.data_dir, 'run')
        with patch('sys.argv', ['adv_text', '-c', self.config, 'attack', '-d', self.dataset, '-o', out]):
            self.assertEqual(main(), 0)
        with open(os.path.join(out, 'report.json')) as j:
            first = json.load(j)
        self.assertEqual(first[0]['n_samples'], 3)
        self.assertEqual(first[0]['victim'], 'inproc:tiny')
        os.remove(os.path.join(out, 'report.json'))
        with patch('sys.argv', ['adv_text', '-c', self.config, 'report', '-o', out]):
            self.assertEqual(main(), 0)
        with open(os.path.join(out, 'report.json')) as j:
            second = json.load(j)
        self.assertEqual(second[0]['asr_percent'], first[0]['asr_percent'])
        self.assertEqual(second[0]['per_sample'], first[0]['per_sample'])
        with patch('sys.argv', ['adv_text', '-c', self.config, 'screen', '-d', self.dataset, '-n', '2']):
            with patch('builtins.print') as p:
                self.assertEqual(main(), 0)
        self.assertEqual(p.call_count, 2)
        with patch('sys.argv', ['adv_text', '-c', self.config, 'screen', '-d', self.dataset, '-o', out]):
            self.assertEqual(main(), 0)
        with open(os.path.join(out, 'screened.jsonl')) as f:
            self.assertEqual(len(f.readlines()), 3)
        with patch('sys.argv', ['adv_text', '-c', self.config, 'screen', '-d', self.dataset, '-n', '4']):
            self.assertEqual(main(), 1)
        with patch('sys.argv', ['adv_text', '-c', self.config, 'attack', '-d',
                                os.path.join(self.data_dir, 'missing.jsonl'), '-o', out]):
            self.assertEqual(main(), 1)
