# Licensed under a 3-clause BSD style license - see LICENSE.rst
# -*- coding: utf-8 -*-
"""Test advText.util.
"""
import unittest
from unittest.mock import patch

import numpy as np

from ..core import default_config_file
from ..util import utcnow, sample_rng, render, common_options


class TestUtil(unittest.TestCase):
    """Test advText.util.
    """
    @classmethod
    def setUpClass(cls):
        pass

    @classmethod
    def tearDownClass(cls):
        pass

    def setUp(self):
        pass

    def tearDown(self):
        pass

    def test_utcnow(self):
        """Test advText.util.utcnow.
        """
        self.assertEqual(utcnow().utcoffset().total_seconds(), 0)

    def test_sample_rng(self):
        """Test advText.util.sample_rng.
        """
        a = sample_rng(7, 's1').random(5)
        self.assertTrue(np.array_equal(a, sample_rng(7, 's1').random(5)))
        self.assertFalse(np.array_equal(a, sample_rng(7, 's2').random(5)))
        self.assertFalse(np.array_equal(a, sample_rng(8, 's1').random(5)))
        self.assertTrue(np.all(np.isfinite(sample_rng(-1, '').random(3))))

    def test_render(self):
        """Test advText.util.render.
        """
        self.assertEqual(render('a good movie'), 'a good movie')
        self.assertEqual(render('a premise', 'a hypothesis'), 'a premise a hypothesis')

    @patch('sys.argv', ['adv_text', '--verbose'])
    def test_common_options(self):
        """Test advText.util.common_options.
        """
        prsr = common_options('Test parser.')
        options = prsr.parse_args()
        self.assertTrue(options.verbose)
        self.assertEqual(options.config, default_config_file())
        self.assertEqual(prsr.prog, 'adv_text')
