# Licensed under a 3-clause BSD style license - see LICENSE.rst
# -*- coding: utf-8 -*-
"""
advText.engine
==============

The attack loop.

Each iteration takes one normalized gradient-ascent step on the
perturbation of the token embeddings, keeps the perturbation inside an L2
ball (re-initializing it at random when it leaves the ball), decodes the
perturbed hidden states with the MLM head and, when the decoded text is new
and more similar to the original than anything queried so far, asks the
victim for its decision.

The search always continues from the perturbed embeddings; decoded tokens
are never embedded again.
"""
import json
from dataclasses import dataclass, asdict, replace

import numpy as np
from desiutil.log import get_logger

from .core import (PerturbationState, CandidateAdversary, AttackOutcome,
                   DegenerateGradient, NoMaskablePosition)
from .reconstruct import (decode_tokens, is_novel, similarity, antonym_filter,
                          accept_adversary, MeanEmbeddingCosine)
from .util import render, sample_rng


#: Gradients with a smaller Frobenius norm cannot be normalized.
MIN_GRAD_NORM = 1e-12


@dataclass(frozen=True)
class StepReport:
    """Telemetry of one engine step.
    """
    step: int
    loss: float
    grad_norm: float
    delta_norm: float
    reinitialized: bool

    def to_json(self, **extra):
        d = dict(extra)
        d.update(asdict(self))
        return json.dumps(d)


def composite_loss(task_loss, mlm_loss, beta):
    """Total loss ``task_loss + beta*mlm_loss``.

    With ``beta < 0``, ascending the total loss increases the task loss
    while decreasing the decoding loss.
    """
    return task_loss + beta * mlm_loss


def reinitialize(shape, epsilon, rng, special=None):
    """Fresh random perturbation inside the epsilon-ball.

    Entries are uniform in ``[-epsilon, epsilon]`` scaled by
    ``1/sqrt(seq_len*d)``.

    Parameters
    ----------
    shape : :class:`tuple`
        ``(seq_len, d)``.
    epsilon : :class:`float`
        Ball radius.
    rng : :class:`numpy.random.Generator`
        Random source.
    special : :class:`numpy.ndarray`, optional
        Boolean mask of rows to zero.

    Returns
    -------
    :class:`numpy.ndarray`
        The perturbation.
    """
    delta = rng.uniform(-epsilon, epsilon, size=shape) / np.sqrt(shape[0]*shape[1])
    if special is not None:
        delta[special] = 0.0
    norm = np.linalg.norm(delta)
    if norm > epsilon:
        delta *= epsilon / norm
    return delta


def project_or_reinit(delta, epsilon, rng, special=None):
    """Keep `delta` if it lies in the epsilon-ball, otherwise draw a new one.

    Parameters
    ----------
    delta : :class:`numpy.ndarray`
        Candidate perturbation.
    epsilon : :class:`float`
        Ball radius.
    rng : :class:`numpy.random.Generator`
        Random source for the re-initialization.
    special : :class:`numpy.ndarray`, optional
        Boolean mask of rows kept at zero.

    Returns
    -------
    :class:`tuple`
        The perturbation and a flag that is ``True`` if it was re-initialized.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive.")
    if np.linalg.norm(delta) <= epsilon:
        return delta, False
    return reinitialize(delta.shape, epsilon, rng, special), True


def pgd_step(state, grad, alpha, epsilon, rng):
    """One normalized gradient-ascent step followed by projection.

    Gradient rows at special positions are zeroed before normalizing, so
    the step has length exactly `alpha` and special rows of the
    perturbation stay zero.

    Parameters
    ----------
    state : :class:`~advText.core.PerturbationState`
        Current state.
    grad : :class:`numpy.ndarray`
        Gradient of the composite loss with respect to the perturbation.
    alpha : :class:`float`
        Step size.
    epsilon : :class:`float`
        Ball radius.
    rng : :class:`numpy.random.Generator`
        Random source for re-initialization.

    Returns
    -------
    :class:`tuple`
        The new :class:`~advText.core.PerturbationState` and the
        re-initialization flag.

    Raises
    ------
    :exc:`~advText.core.DegenerateGradient`
        If the gradient norm is below :data:`MIN_GRAD_NORM`.
    """
    g = np.array(grad, dtype=np.float64)
    if g.shape != state.delta.shape:
        raise ValueError(f"Gradient shape {g.shape} does not match {state.delta.shape}.")
    if not np.all(np.isfinite(g)):
        raise ValueError("Gradient contains non-finite values.")
    special = state.special
    g[special] = 0.0
    norm = np.linalg.norm(g)
    if norm < MIN_GRAD_NORM:
        raise DegenerateGradient(f"Gradient norm {norm:g} is too small to normalize.")
    delta, reinitialized = project_or_reinit(state.delta + alpha*g/norm, epsilon, rng, special)
    return replace(state, delta=delta, step=state.step + 1), reinitialized


def mask_random_token(tokens, rng, mask_token_id):
    """Replace one uniformly chosen non-special token by the mask token.

    Parameters
    ----------
    tokens : :class:`~advText.core.TokenSequence`
        Input sequence.
    rng : :class:`numpy.random.Generator`
        Random source.
    mask_token_id : :class:`int`
        Id of the mask token.

    Returns
    -------
    :class:`~advText.core.TokenSequence`
        The masked sequence.

    Raises
    ------
    :exc:`~advText.core.NoMaskablePosition`
        If every position is special.
    """
    positions = tokens.maskable
    if not positions:
        raise NoMaskablePosition("Every position of the sequence is special.")
    i = positions[int(rng.integers(len(positions)))]
    return tokens.replace(i, mask_token_id)


def run_attack(sample, local, victim, cfg, scorer=None, lexicon=None, rng=None, report=None):
    """Attack one sample.

    Parameters
    ----------
    sample : :class:`~advText.core.LabeledSample`
        A sample the victim classifies correctly.
    local : :class:`~advText.model.LocalModelHandle`
        Model supplying gradients and the MLM decoder.
    victim : :class:`~advText.victim.VictimClient`
        Budgeted victim of this session.
    cfg : :class:`~advText.core.AttackConfig`
        Attack parameters.
    scorer : :class:`~advText.reconstruct.SimilarityScorer`, optional
        Similarity scorer, by default the local mean-embedding cosine.
    lexicon : :class:`~advText.reconstruct.AntonymLexicon`, optional
        Antonyms to filter; no filtering if ``None``.
    rng : :class:`numpy.random.Generator`, optional
        Random source, by default derived from ``cfg.random_seed`` and the
        sample id.
    report : callable, optional
        Called with a :class:`StepReport` after every step.

    Returns
    -------
    :class:`~advText.core.AttackOutcome`
        The outcome.
    """
    log = get_logger()
    if scorer is None:
        scorer = MeanEmbeddingCosine(local)
    if rng is None:
        rng = sample_rng(cfg.random_seed, sample.id)
    original = local.tokenize(sample.text_a, sample.text_b)
    original_text = render(sample.text_a, sample.text_b)
    tokens = mask_random_token(original, rng, local.mask_token_id) if cfg.mask_one_token else original
    emb = local.embed(tokens)
    exclude = sorted(local.special_token_ids)
    adv0 = decode_tokens(local.mlm_logits(local.forward_hidden(emb)), tokens, exclude)
    state = PerturbationState.start(emb, adv0)
    special = state.special
    iterations = 0
    for i in range(cfg.max_iterations):
        iterations = i + 1
        loss, grad = local.loss_and_grad(emb, state.delta, sample.gold_label, cfg.beta,
                                         targets=original.token_ids)
        grad_norm = float(np.linalg.norm(grad[~special]))
        try:
            state, reinitialized = pgd_step(state, grad, cfg.alpha, cfg.epsilon, rng)
        except DegenerateGradient as e:
            log.debug("%s: %s Re-initializing.", sample.id, e)
            state = replace(state, delta=reinitialize(state.delta.shape, cfg.epsilon, rng, special),
                            step=state.step + 1)
            reinitialized = True
        if report is not None:
            report(StepReport(state.step, float(loss), grad_norm,
                              float(np.linalg.norm(state.delta)), reinitialized))
        candidate = decode_tokens(local.mlm_logits(local.forward_hidden(state.perturbed)), tokens, exclude)
        novel = is_novel(candidate, state.previous_decodings)
        state.previous_decodings.add(candidate.key)
        if not novel:
            continue
        text_a, text_b = local.detokenize(candidate)
        text = render(text_a, text_b)
        score = similarity(text, original_text, scorer)
        if state.best_similarity_so_far is not None and score <= state.best_similarity_so_far:
            log.debug("%s: step %d, '%s' not more similar (%.4f).", sample.id, state.step, text, score)
            continue
        if lexicon is not None and not antonym_filter(original, candidate, lexicon, local):
            log.debug("%s: step %d, '%s' rejected by antonym filter.", sample.id, state.step, text)
            continue
        if victim.exhausted:
            log.debug("%s: query budget exhausted at step %d.", sample.id, state.step)
            break
        decision = victim.classify(text_a, text_b)
        state.best_similarity_so_far = score
        adversary = CandidateAdversary(candidate, score, novel, iterations)
        log.debug("%s: step %d, queried '%s' (similarity %.4f), label %d.",
                  sample.id, state.step, text, score, decision.predicted_label)
        if decision.predicted_label != sample.gold_label and accept_adversary(adversary, cfg.use_threshold):
            return AttackOutcome(sample_id=sample.id, success=True,
                                 queries_used=victim.queries_made, iterations_used=iterations,
                                 adversarial_text=text, final_similarity=score)
    return AttackOutcome(sample_id=sample.id, success=False,
                         queries_used=victim.queries_made, iterations_used=iterations)


def verify_query_log(records, original_text, adv0_text, scorer, max_queries,
                     lexicon=None, model=None, original_tokens=None):
    """Replay the query log of one finished session.

    Parameters
    ----------
    records : :class:`list`
        :class:`~advText.victim.QueryRecord` entries of the session.
    original_text : :class:`str`
        Rendered original sample.
    adv0_text : :class:`str`
        Rendered decoding of the unperturbed (possibly masked) input.
    scorer : :class:`~advText.reconstruct.SimilarityScorer`
        Scorer used by the session.
    max_queries : :class:`int`
        Query budget.
    lexicon : :class:`~advText.reconstruct.AntonymLexicon`, optional
        If set, also check that no queried text holds an antonym substitution.
    model : :class:`~advText.model.LocalModelHandle`, optional
        Tokenizer for the antonym check.
    original_tokens : :class:`~advText.core.TokenSequence`, optional
        Tokens of the original sample for the antonym check.

    Returns
    -------
    :class:`list`
        Descriptions of violations; empty if the log is consistent.
    """
    violations = []
    if len(records) > max_queries:
        violations.append(f"{len(records):d} queries exceed the budget of {max_queries:d}.")
    seen = {adv0_text}
    previous = None
    for k, r in enumerate(records):
        if r.text in seen:
            violations.append(f"Query {k:d} ('{r.text}') is not novel.")
        seen.add(r.text)
        score = similarity(r.text, original_text, scorer)
        if previous is not None and not score > previous:
            violations.append(f"Query {k:d} similarity {score:.6f} does not improve on {previous:.6f}.")
        previous = score
        if lexicon is not None:
            candidate = model.tokenize(r.text)
            if len(candidate) == len(original_tokens) and not antonym_filter(original_tokens, candidate,
                                                                              lexicon, model):
                violations.append(f"Query {k:d} ('{r.text}') substitutes an antonym.")
    return violations
