# Licensed under a 3-clause BSD style license - see LICENSE.rst
# -*- coding: utf-8 -*-
"""Test advText.reconstruct.
"""
import os
import unittest
from tempfile import mkdtemp
from shutil import rmtree
import importlib.resources as ir

import numpy as np

from ..core import TokenSequence, CandidateAdversary, ParseError, ScorerUnavailable
from ..reconstruct import (decode_tokens, is_novel, accept_adversary, MeanEmbeddingCosine,
                           get_scorer, similarity, AntonymLexicon, read_lexicon,
                           build_wordnet_lexicon, antonym_filter)
from ..tiny import TinyModel, MASK_ID

try:
    from nltk.corpus import wordnet
    wordnet.ensure_loaded()
    wordnet_available = True
except (ImportError, LookupError):
    wordnet_available = False


class TestReconstruct(unittest.TestCase):
    """Test advText.reconstruct.
    """
    @classmethod
    def setUpClass(cls):
        cls.model = TinyModel.build()
        cls.scorer = MeanEmbeddingCosine(cls.model)
        cls.lexicon = AntonymLexicon({'good': ['bad'], 'bad': ['good']})
        cls.data_dir = mkdtemp()

    @classmethod
    def tearDownClass(cls):
        rmtree(cls.data_dir)

    def setUp(self):
        pass

    def tearDown(self):
        pass

    def test_decode_tokens(self):
        """Test advText.reconstruct.decode_tokens.
        """
        original = TokenSequence((1, 5, 6, 2), (True, False, False, True))
        logits = np.zeros((4, 8))
        logits[0, 7] = logits[1, 4] = logits[2, 6] = logits[3, 5] = 10.0
        decoded = decode_tokens(logits, original)
        self.assertEqual(decoded.token_ids, (1, 4, 6, 2))
        self.assertEqual(decoded.special_mask, original.special_mask)
        #
        # Ties go to the lowest id.
        #
        logits = np.zeros((4, 8))
        logits[1, [3, 6]] = 1.0
        self.assertEqual(decode_tokens(logits, original).token_ids[1:3], (3, 0))
        self.assertEqual(decode_tokens(logits, original, exclude=[0, 1, 2, 3]).token_ids[1:3], (6, 4))
        with self.assertRaises(ValueError):
            decode_tokens(np.zeros((3, 8)), original)

    def test_decode_never_special(self):
        """Test that decoding never emits a special token at a regular position.
        """
        t = self.model.tokenize('a good movie').replace(2, MASK_ID)
        h = self.model.forward_hidden(self.model.embed(t))
        logits = self.model.mlm_logits(h)
        decoded = decode_tokens(logits, t, sorted(self.model.special_token_ids))
        for i in t.maskable:
            self.assertNotIn(decoded.token_ids[i], self.model.special_token_ids)

    def test_is_novel(self):
        """Test advText.reconstruct.is_novel.
        """
        a = TokenSequence((1, 5, 2), (True, False, True))
        b = TokenSequence((1, 6, 2), (True, False, True))
        previous = {a.key}
        self.assertFalse(is_novel(a, previous))
        self.assertTrue(is_novel(b, previous))
        self.assertFalse(is_novel(TokenSequence((1, 5, 2), (True, False, True), 'x'), previous))

    def test_accept_adversary(self):
        """Test advText.reconstruct.accept_adversary.
        """
        t = TokenSequence((1, 5, 2), (True, False, True))
        self.assertTrue(accept_adversary(CandidateAdversary(t, 0.71, True, 3), 0.7))
        self.assertFalse(accept_adversary(CandidateAdversary(t, 0.7, True, 3), 0.7))
        self.assertFalse(accept_adversary(CandidateAdversary(t, 0.2, True, 3), 0.7))

    def test_similarity(self):
        """Test advText.reconstruct.similarity.
        """
        texts = ['the film was good', 'the film was bad', 'a dull plot', 'this music is lovely']
        for a in texts:
            self.assertAlmostEqual(similarity(a, a, self.scorer), 1.0, places=12)
            for b in texts:
                s = similarity(a, b, self.scorer)
                self.assertEqual(s, similarity(b, a, self.scorer))
                self.assertTrue(-1.0 <= s <= 1.0)
        close = similarity('the film was good', 'the film was bad', self.scorer)
        far = similarity('the film was good', 'a dull plot', self.scorer)
        self.assertGreater(close, far)
        with self.assertRaises(ValueError):
            similarity('', 'a dull plot', self.scorer)
        self.assertIsInstance(get_scorer('mean-embed-cosine', self.model), MeanEmbeddingCosine)
        with self.assertRaises(ValueError):
            get_scorer('bleu', self.model)

    def test_lexicon(self):
        """Test advText.reconstruct.AntonymLexicon and read_lexicon.
        """
        lex = read_lexicon(str(ir.files('advText.test') / 't' / 'antonyms.txt'))
        self.assertEqual(len(lex), 2)
        self.assertIn('GOOD', lex)
        self.assertTrue(lex.is_antonym('great', 'Awful'))
        self.assertFalse(lex.is_antonym('bad', 'good'))
        self.assertEqual(lex.antonyms('movie'), frozenset())
        with self.assertRaises(ParseError) as e:
            read_lexicon(str(ir.files('advText.test') / 't' / 'bad_lexicon.txt'))
        self.assertEqual(e.exception.line, 1)
        filename = os.path.join(self.data_dir, 'lexicon.txt')
        lex.write(filename)
        again = read_lexicon(filename)
        self.assertEqual(again.antonyms('good'), lex.antonyms('good'))
        self.assertEqual(again.antonyms('great'), lex.antonyms('great'))
        fixture = read_lexicon(str(ir.files('advText.test') / 't' / 'tiny_antonyms.txt'))
        self.assertTrue(fixture.is_antonym('good', 'bad'))
        self.assertTrue(fixture.is_antonym('bad', 'good'))

    def test_antonym_filter(self):
        """Test advText.reconstruct.antonym_filter.
        """
        original = self.model.tokenize('a good movie')
        self.assertFalse(antonym_filter(original, self.model.tokenize('a bad movie'), self.lexicon, self.model))
        self.assertTrue(antonym_filter(original, self.model.tokenize('a fine movie'), self.lexicon, self.model))
        self.assertTrue(antonym_filter(original, original, self.lexicon, self.model))
        self.assertTrue(antonym_filter(original, self.model.tokenize('a bad movie'), AntonymLexicon(),
                                       self.model))
        two = self.model.tokenize('good the bad')
        swapped = self.model.tokenize('bad the good')
        self.assertFalse(antonym_filter(two, swapped, self.lexicon, self.model))
        with self.assertRaises(ValueError):
            antonym_filter(original, self.model.tokenize('a movie'), self.lexicon, self.model)

    @unittest.skipUnless(wordnet_available, 'WordNet is not installed.')
    def test_wordnet_lexicon(self):
        """Test advText.reconstruct.build_wordnet_lexicon.
        """
        lex = build_wordnet_lexicon(['good', 'happy'])
        self.assertTrue(lex.is_antonym('good', 'bad'))
        self.assertTrue(lex.is_antonym('bad', 'good'))
        self.assertTrue(lex.is_antonym('happy', 'unhappy'))

    @unittest.skipIf(wordnet_available, 'WordNet is installed.')
    def test_wordnet_missing(self):
        """Test advText.reconstruct.build_wordnet_lexicon without WordNet.
        """
        with self.assertRaises(ScorerUnavailable):
            build_wordnet_lexicon(['good'])
