# Licensed under a 3-clause BSD style license - see LICENSE.rst
# -*- coding: utf-8 -*-
"""Test advText.engine.
"""
import json
import unittest
from collections import Counter
from dataclasses import replace

import numpy as np

from ..core import (AttackConfig, LabeledSample, PerturbationState, TokenSequence, EmbeddedInput,
                    Decision, DegenerateGradient, NoMaskablePosition)
from ..engine import (MIN_GRAD_NORM, StepReport, composite_loss, reinitialize, project_or_reinit,
                      pgd_step, mask_random_token, run_attack, verify_query_log)
from ..reconstruct import MeanEmbeddingCosine, similarity
from ..tiny import TinyModel, MASK_ID, generate_corpus
from ..util import utcnow
from ..victim import VictimClient, QueryRecord


class ConstantAdapter:
    """Victim answering `label` whatever the text, or the opposite of `label` with ``flip``.
    """
    name = 'constant'

    def __init__(self, label, flip=False):
        self.label = label
        self.flip = flip

    def decide(self, text_a, text_b=None):
        return 1 - self.label if self.flip else self.label


class TestEngine(unittest.TestCase):
    """Test advText.engine.
    """
    @classmethod
    def setUpClass(cls):
        cls.model = TinyModel.build()
        cls.scorer = MeanEmbeddingCosine(cls.model)
        cls.tokens = TokenSequence((1, 4, 5, 2), (True, False, False, True))
        cls.emb = EmbeddedInput(np.zeros((4, 3)), cls.tokens)
        cls.cfg = AttackConfig(alpha=1.0, epsilon=5.0, beta=-1.0, use_threshold=0.0,
                               max_iterations=50, max_queries=30, mask_one_token=False,
                               random_seed=3)
        cls.sample = LabeledSample('e1', 'the film was good', 1, 2)

    @classmethod
    def tearDownClass(cls):
        pass

    def setUp(self):
        self.state = PerturbationState.start(self.emb, self.tokens)
        self.rng = np.random.default_rng(17)

    def tearDown(self):
        pass

    def test_composite_loss(self):
        """Test advText.engine.composite_loss.
        """
        self.assertEqual(composite_loss(2.0, 1.0, -1.0), 1.0)
        self.assertEqual(composite_loss(2.0, 3.0, 0.0), 2.0)
        self.assertEqual(composite_loss(0.5, 0.25, -2.0), 0.0)

    def test_pgd_step(self):
        """Test advText.engine.pgd_step.
        """
        grad = np.array([[5.0, 5.0, 5.0], [3.0, 0.0, 0.0], [0.0, 4.0, 0.0], [1.0, 1.0, 1.0]])
        state, reinitialized = pgd_step(self.state, grad, 1.0, 5.0, self.rng)
        self.assertFalse(reinitialized)
        self.assertEqual(state.step, 1)
        self.assertTrue(np.allclose(state.delta, [[0, 0, 0], [0.6, 0, 0], [0, 0.8, 0], [0, 0, 0]]))
        self.assertEqual(self.state.step, 0)
        self.assertTrue(np.array_equal(self.state.delta, np.zeros((4, 3))))
        scaled, _ = pgd_step(self.state, 1000.0*grad, 1.0, 5.0, self.rng)
        self.assertTrue(np.allclose(scaled.delta, state.delta, rtol=0, atol=1e-15))
        for _ in range(3):
            state, reinitialized = pgd_step(state, grad, 1.0, 5.0, self.rng)
            self.assertFalse(reinitialized)
        self.assertAlmostEqual(np.linalg.norm(state.delta), 4.0)
        state, reinitialized = pgd_step(state, grad, 1.5, 5.0, self.rng)
        self.assertTrue(reinitialized)
        self.assertLessEqual(np.linalg.norm(state.delta), 5.0)
        self.assertTrue(np.all(state.delta[[0, 3]] == 0))
        self.assertEqual(state.step, 5)

    def test_pgd_step_geometry(self):
        """Test norm and length of many random steps.
        """
        state = self.state
        for _ in range(500):
            grad = self.rng.standard_normal((4, 3)) * self.rng.uniform(1e-3, 1e3)
            previous = state.delta
            state, reinitialized = pgd_step(state, grad, 0.7, 2.0, self.rng)
            self.assertLessEqual(np.linalg.norm(state.delta), 2.0 * (1 + 1e-12))
            self.assertTrue(np.all(state.delta[self.tokens.special] == 0))
            if not reinitialized:
                self.assertAlmostEqual(np.linalg.norm(state.delta - previous), 0.7, places=9)

    def test_degenerate_gradient(self):
        """Test advText.engine.pgd_step with a vanishing gradient.
        """
        with self.assertRaises(DegenerateGradient):
            pgd_step(self.state, np.zeros((4, 3)), 1.0, 5.0, self.rng)
        special_only = np.zeros((4, 3))
        special_only[0] = 1.0
        with self.assertRaises(DegenerateGradient):
            pgd_step(self.state, special_only, 1.0, 5.0, self.rng)
        tiny = np.zeros((4, 3))
        tiny[1, 1] = MIN_GRAD_NORM / 2
        with self.assertRaises(DegenerateGradient):
            pgd_step(self.state, tiny, 1.0, 5.0, self.rng)
        with self.assertRaises(ValueError):
            pgd_step(self.state, np.ones((2, 3)), 1.0, 5.0, self.rng)
        bad = np.ones((4, 3))
        bad[2, 2] = np.nan
        with self.assertRaises(ValueError):
            pgd_step(self.state, bad, 1.0, 5.0, self.rng)

    def test_project_or_reinit(self):
        """Test advText.engine.project_or_reinit.
        """
        inside = np.full((4, 3), 0.1)
        delta, flag = project_or_reinit(inside, 1.0, self.rng)
        self.assertFalse(flag)
        self.assertIs(delta, inside)
        boundary = np.zeros((4, 3))
        boundary[1, 0] = 1.0
        delta, flag = project_or_reinit(boundary, 1.0, self.rng)
        self.assertFalse(flag)
        delta, flag = project_or_reinit(2.0*boundary, 1.0, self.rng, self.tokens.special)
        self.assertTrue(flag)
        self.assertLessEqual(np.linalg.norm(delta), 1.0)
        self.assertTrue(np.all(delta[[0, 3]] == 0))
        with self.assertRaises(ValueError):
            project_or_reinit(inside, 0.0, self.rng)

    def test_reinitialize(self):
        """Test the distribution of advText.engine.reinitialize.
        """
        epsilon = 2.0
        bound = epsilon / np.sqrt(20)
        draws = np.array([reinitialize((4, 5), epsilon, self.rng) for _ in range(2000)])
        self.assertTrue(np.all(np.abs(draws) <= bound))
        self.assertLess(abs(draws.mean()), 0.01 * bound)
        self.assertAlmostEqual(draws.var() / (bound**2 / 3), 1.0, delta=0.05)
        self.assertTrue(np.all(np.linalg.norm(draws, axis=(1, 2)) <= epsilon))
        special = np.array([True, False, False, True])
        d = reinitialize((4, 5), epsilon, self.rng, special)
        self.assertTrue(np.all(d[special] == 0))
        self.assertTrue(np.all(d[~special] != 0))

    def test_mask_random_token(self):
        """Test advText.engine.mask_random_token.
        """
        tokens = TokenSequence((1, 4, 5, 6, 2), (True, False, False, False, True))
        counts = Counter()
        for _ in range(3000):
            masked = mask_random_token(tokens, self.rng, MASK_ID)
            changed = [i for i, (a, b) in enumerate(zip(tokens.token_ids, masked.token_ids)) if a != b]
            self.assertEqual(len(changed), 1)
            self.assertEqual(masked.token_ids[changed[0]], MASK_ID)
            self.assertEqual(masked.special_mask, tokens.special_mask)
            counts[changed[0]] += 1
        self.assertEqual(set(counts), {1, 2, 3})
        for i in (1, 2, 3):
            self.assertTrue(850 < counts[i] < 1150)
        with self.assertRaises(NoMaskablePosition):
            mask_random_token(TokenSequence((1, 2), (True, True)), self.rng, MASK_ID)

    def test_step_report(self):
        """Test advText.engine.StepReport.
        """
        r = StepReport(3, 0.5, 2.0, 1.5, False)
        self.assertEqual(json.loads(r.to_json(sample_id='x')),
                         {'sample_id': 'x', 'step': 3, 'loss': 0.5, 'grad_norm': 2.0,
                          'delta_norm': 1.5, 'reinitialized': False})

    def test_run_attack_no_flip(self):
        """Test advText.engine.run_attack against a victim that never flips.
        """
        reports = []
        victim = VictimClient(ConstantAdapter(self.sample.gold_label), self.cfg.max_queries)
        outcome = run_attack(self.sample, self.model, victim, self.cfg, report=reports.append)
        self.assertFalse(outcome.success)
        self.assertIsNone(outcome.adversarial_text)
        self.assertIsNone(outcome.final_similarity)
        self.assertEqual(outcome.queries_used, victim.queries_made)
        self.assertLessEqual(outcome.queries_used, self.cfg.max_queries)
        if outcome.queries_used < self.cfg.max_queries:
            self.assertEqual(outcome.iterations_used, self.cfg.max_iterations)
        self.assertEqual(len(reports), outcome.iterations_used)
        self.assertEqual([r.step for r in reports], list(range(1, outcome.iterations_used + 1)))
        self.assertTrue(all(r.delta_norm <= self.cfg.epsilon * (1 + 1e-12) for r in reports))
        log = victim.query_log()
        scores = [similarity(r.text, self.sample.text_a, self.scorer) for r in log]
        self.assertTrue(all(b > a for a, b in zip(scores, scores[1:])))
        self.assertEqual(len(set(r.text for r in log)), len(log))

    def test_run_attack_budget(self):
        """Test that the query budget bounds a session.
        """
        cfg = replace(self.cfg, max_queries=1)
        victim = VictimClient(ConstantAdapter(self.sample.gold_label), cfg.max_queries)
        outcome = run_attack(self.sample, self.model, victim, cfg)
        self.assertLessEqual(outcome.queries_used, 1)
        self.assertFalse(outcome.success)

    def test_run_attack_flip(self):
        """Test advText.engine.run_attack against a victim that always flips.
        """
        victim = VictimClient(ConstantAdapter(self.sample.gold_label, flip=True), self.cfg.max_queries)
        outcome = run_attack(self.sample, self.model, victim, self.cfg)
        self.assertTrue(outcome.success)
        self.assertEqual(outcome.queries_used, 1)
        self.assertEqual(victim.query_log()[0].text, outcome.adversarial_text)
        self.assertGreater(outcome.final_similarity, self.cfg.use_threshold)
        self.assertNotEqual(outcome.adversarial_text, self.sample.text_a)
        strict = replace(self.cfg, use_threshold=1.0)
        victim = VictimClient(ConstantAdapter(self.sample.gold_label, flip=True), strict.max_queries)
        outcome = run_attack(self.sample, self.model, victim, strict)
        self.assertFalse(outcome.success)

    def test_run_attack_deterministic(self):
        """Test that a session depends only on its seed and sample.
        """
        cfg = replace(self.cfg, mask_one_token=True)
        outcomes = []
        for _ in range(2):
            victim = VictimClient(ConstantAdapter(self.sample.gold_label), cfg.max_queries)
            outcomes.append((run_attack(self.sample, self.model, victim, cfg),
                             [r.text for r in victim.query_log()]))
        self.assertEqual(outcomes[0], outcomes[1])

    def test_run_attack_tiny_victim(self):
        """Test attacks with the tiny model as local model and victim.
        """
        from ..victim import InProcessAdapter
        adapter = InProcessAdapter(self.model)
        cfg = replace(self.cfg, use_threshold=0.5)
        successes = 0
        for s in generate_corpus(10, seed=8):
            victim = VictimClient(adapter, cfg.max_queries)
            outcome = run_attack(s, self.model, victim, cfg, scorer=self.scorer)
            self.assertEqual(outcome.queries_used, victim.queries_made)
            if outcome.success:
                successes += 1
                self.assertNotEqual(self.model.predict(outcome.adversarial_text), s.gold_label)
                self.assertGreater(outcome.final_similarity, 0.5)
        self.assertGreater(successes, 0)

    def test_verify_query_log(self):
        """Test advText.engine.verify_query_log.
        """
        original = 'the film was good'

        def record(text):
            return QueryRecord(text, Decision(1), utcnow())

        texts = ['a dull plot is sad', 'the plot was bad', 'the film was bad']
        texts.sort(key=lambda t: similarity(t, original, self.scorer))
        log = [record(t) for t in texts]
        self.assertEqual(verify_query_log(log, original, 'the film is good', self.scorer, 3), [])
        self.assertEqual(len(verify_query_log(log, original, 'the film is good', self.scorer, 2)), 1)
        self.assertEqual(len(verify_query_log(log, original, texts[0], self.scorer, 3)), 1)
        reversed_log = list(reversed(log))
        self.assertEqual(len(verify_query_log(reversed_log, original, 'the film is good', self.scorer, 3)), 2)
        repeated = log + [log[-1]]
        violations = verify_query_log(repeated, original, 'the film is good', self.scorer, 10)
        self.assertEqual(len(violations), 2)
        from ..reconstruct import AntonymLexicon
        lex = AntonymLexicon({'good': ['bad'], 'bad': ['good']})
        violations = verify_query_log([record('the film was bad')], original, 'the film is good',
                                      self.scorer, 3, lexicon=lex, model=self.model,
                                      original_tokens=self.model.tokenize(original))
        self.assertEqual(len(violations), 1)
        self.assertIn('antonym', violations[0])
