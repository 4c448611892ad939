# Licensed under a 3-clause BSD style license - see LICENSE.rst
# -*- coding: utf-8 -*-
"""
advText.selftest
================

Invariant checks on the tiny reference model.

Every check returns a :class:`CheckResult`; :func:`run_checks` runs them
all.  The default sizes are those of the full checks; tests call the
same functions with smaller sizes.
"""
import time
from collections import namedtuple
from dataclasses import replace

import numpy as np
from desiutil.log import get_logger

from .core import AttackConfig, PerturbationState
from .engine import (run_attack, pgd_step, mask_random_token, verify_query_log)
from .reconstruct import decode_tokens, MeanEmbeddingCosine, AntonymLexicon
from .tiny import (TinyModel, generate_corpus, substitution_oracle, check_gradient,
                   POSITIVE_WORDS, NEGATIVE_WORDS)
from .util import render, sample_rng
from .victim import VictimClient, InProcessAdapter


CheckResult = namedtuple('CheckResult', ['name', 'passed', 'detail', 'seconds'])


def calibration_config(seed=0):
    """Attack parameters of the end-to-end calibration run.
    """
    return AttackConfig(alpha=1.0, epsilon=5.0, beta=-1.0, use_threshold=0.5,
                        max_iterations=50, max_queries=30, mask_one_token=False,
                        random_seed=seed)


def polarity_lexicon():
    """Lexicon making every positive word an antonym of every negative word.
    """
    entries = dict((w, NEGATIVE_WORDS) for w in POSITIVE_WORDS)
    entries.update(dict((w, POSITIVE_WORDS) for w in NEGATIVE_WORDS))
    return AntonymLexicon(entries)


def clean_decoding(sample, model, cfg):
    """Decoding of the unperturbed input of a session, masked as the session masks it.
    """
    tokens = model.tokenize(sample.text_a, sample.text_b)
    if cfg.mask_one_token:
        tokens = mask_random_token(tokens, sample_rng(cfg.random_seed, sample.id), model.mask_token_id)
    adv0 = decode_tokens(model.mlm_logits(model.forward_hidden(model.embed(tokens))), tokens,
                         sorted(model.special_token_ids))
    return render(*model.detokenize(adv0))


def _timed(name, func, *args):
    t0 = time.time()
    passed, detail = func(*args)
    return CheckResult(name, passed, detail, time.time() - t0)


def check_gradient_oracle(model, n=100, seed=0, tolerance=1e-4):
    """Analytic gradients against central differences on random inputs."""
    rng = np.random.default_rng(seed)
    corpus = generate_corpus(n, seed=seed + 1)
    worst = 0.0
    for s in corpus:
        emb = model.embed(model.tokenize(s.text_a))
        delta = rng.standard_normal(emb.embeddings.shape)
        delta *= rng.uniform(0.0, 5.0) / np.linalg.norm(delta)
        beta = -rng.uniform(0.1, 2.0)
        worst = max(worst, check_gradient(model, emb, delta, s.gold_label, beta, rng=rng))
    return worst < tolerance, f"max relative error {worst:.3g}"


def check_pgd_geometry(model, n=10000, seed=0, alpha=1.0, epsilon=5.0):
    """Norm bound, step length and zero special rows over random steps."""
    rng = np.random.default_rng(seed)
    corpus = generate_corpus(max(1, n // 20), seed=seed + 2)
    failures = 0
    state = None
    for k in range(n):
        if k % 20 == 0:
            s = corpus[(k // 20) % len(corpus)]
            emb = model.embed(model.tokenize(s.text_a))
            state = PerturbationState.start(emb, emb.tokens)
        grad = rng.standard_normal(state.delta.shape) * rng.uniform(1e-3, 1e3)
        previous = state.delta
        state, reinitialized = pgd_step(state, grad, alpha, epsilon, rng)
        if np.linalg.norm(state.delta) > epsilon * (1 + 1e-12):
            failures += 1
        if np.any(state.delta[state.special] != 0):
            failures += 1
        if not reinitialized and abs(np.linalg.norm(state.delta - previous) - alpha) > 1e-6*alpha:
            failures += 1
    return failures == 0, f"{failures:d} violations in {n:d} steps"


def check_reconstruction(model, n=1000, seed=0, minimum=0.99):
    """Fraction of non-special tokens recovered by decoding clean inputs."""
    total, recovered = 0, 0
    exclude = sorted(model.special_token_ids)
    for s in generate_corpus(n, seed=seed + 3):
        tokens = model.tokenize(s.text_a)
        decoded = decode_tokens(model.mlm_logits(model.forward_hidden(model.embed(tokens))), tokens, exclude)
        for i in tokens.maskable:
            total += 1
            recovered += decoded.token_ids[i] == tokens.token_ids[i]
    fraction = recovered / total
    return fraction >= minimum, f"{100*fraction:.2f}% of {total:d} tokens recovered"


def _sessions(model, n, seed, lexicon):
    scorer = MeanEmbeddingCosine(model)
    adapter = InProcessAdapter(model)
    rng = np.random.default_rng(seed)
    violations = []
    for k, s in enumerate(generate_corpus(n, seed=seed + 4)):
        cfg = replace(calibration_config(seed=int(rng.integers(2**31))),
                      mask_one_token=bool(k % 2), max_queries=int(rng.integers(1, 31)))
        victim = VictimClient(adapter, cfg.max_queries)
        outcome = run_attack(s, model, victim, cfg, scorer=scorer, lexicon=lexicon)
        if outcome.queries_used != victim.queries_made:
            violations.append(f"{s.id}: queries_used {outcome.queries_used:d} != {victim.queries_made:d}")
        original = model.tokenize(s.text_a, s.text_b)
        violations += [f"{s.id}: {v}" for v in
                       verify_query_log(victim.query_log(), render(s.text_a, s.text_b),
                                        clean_decoding(s, model, cfg), scorer, cfg.max_queries,
                                        lexicon=lexicon, model=model, original_tokens=original)]
    return violations


def check_query_protocol(model, n=200, seed=0):
    """Replay the query logs of random sessions."""
    violations = _sessions(model, n, seed, None)
    return not violations, f"{len(violations):d} violations in {n:d} sessions"


def check_antonym_gate(model, n=200, seed=0):
    """No antonym substitution reaches the victim."""
    violations = _sessions(model, n, seed, polarity_lexicon())
    return not violations, f"{len(violations):d} violations in {n:d} sessions"


def check_calibration(model, n=100, seed=0, minimum=70.0):
    """Attack success rate with the tiny model as local model and victim."""
    cfg = calibration_config(seed)
    adapter = InProcessAdapter(model)
    corpus = generate_corpus(n, seed=seed + 5)
    flippable = sum(substitution_oracle(s, model) for s in corpus)
    successes = 0
    for s in corpus:
        outcome = run_attack(s, model, VictimClient(adapter, cfg.max_queries), cfg)
        successes += outcome.success
    asr = 100.0 * successes / n
    return asr >= minimum, f"ASR {asr:.1f}%, {flippable:d}/{n:d} samples flippable by one substitution"


def run_checks(model=None, scale=1.0, seed=0):
    """Run every check.

    Parameters
    ----------
    model : :class:`~advText.tiny.TinyModel`, optional
        Model to check; the default reference model if ``None``.
    scale : :class:`float`, optional
        Multiplier of every check size.
    seed : :class:`int`, optional
        Seed of the random inputs.

    Returns
    -------
    :class:`list`
        :class:`CheckResult` objects.
    """
    log = get_logger()
    if model is None:
        model = TinyModel.build()

    def size(n):
        return max(1, int(round(n * scale)))

    results = []
    for name, func, n in (('gradient oracle', check_gradient_oracle, 100),
                          ('PGD geometry', check_pgd_geometry, 10000),
                          ('reconstruction fidelity', check_reconstruction, 1000),
                          ('query protocol replay', check_query_protocol, 200),
                          ('antonym gate', check_antonym_gate, 200),
                          ('calibration', check_calibration, 100)):
        r = _timed(name, func, model, size(n), seed)
        log.info("%s: %s (%s, %.1f s).", name, 'PASS' if r.passed else 'FAIL', r.detail, r.seconds)
        results.append(r)
    return results
