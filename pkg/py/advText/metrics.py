# Licensed under a 3-clause BSD style license - see LICENSE.rst
# -*- coding: utf-8 -*-
"""
advText.metrics
===============

Automatic evaluation of attack outcomes: attack success rate, semantic
similarity, increase of grammar errors and increase of perplexity.

Quality metrics (similarity, grammar, perplexity) are averaged over
successful attacks only; the attack success rate is computed over all
attempts.  Means use :func:`math.fsum`, so a report does not depend on the
order of its outcomes.
"""
import os
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from astropy.table import Table, MaskedColumn
from desiutil.log import get_logger

from .core import AttackOutcome, EmptyInput, ScorerUnavailable
from .reconstruct import similarity


#: Header line of the text report.
AGGREGATION_NOTE = "Quality metrics are means over successful attacks only; ASR is over all attempts."


def attack_success_rate(outcomes):
    """Percentage of successful attacks.

    Parameters
    ----------
    outcomes : :class:`list`
        :class:`~advText.core.AttackOutcome` objects.

    Returns
    -------
    :class:`float`
        ASR in percent.

    Raises
    ------
    :exc:`~advText.core.EmptyInput`
        If `outcomes` is empty.
    """
    if len(outcomes) == 0:
        raise EmptyInput("Cannot compute the success rate of zero attacks.")
    return 100.0 * sum(1 for o in outcomes if o.success) / len(outcomes)


@dataclass(frozen=True)
class QualityScorer:
    """Pluggable grammar-error counter and perplexity function.

    Either callable may be ``None``, in which case the corresponding metric
    is unavailable.
    """
    grammar_counter: Optional[Callable[[str], int]] = None
    perplexity: Optional[Callable[[str], float]] = None

    def errors(self, text):
        if self.grammar_counter is None:
            raise ScorerUnavailable("No grammar checker configured.")
        return int(self.grammar_counter(text))

    def ppl(self, text):
        if self.perplexity is None:
            raise ScorerUnavailable("No language model configured.")
        return float(self.perplexity(text))


def delta_grammar(original, adversarial, scorer):
    """Increase of grammar errors from `original` to `adversarial`; may be negative.
    """
    after = scorer.errors(adversarial)
    if original == adversarial:
        return 0
    return after - scorer.errors(original)


def delta_perplexity(original, adversarial, scorer):
    """Increase of perplexity from `original` to `adversarial`.
    """
    after = scorer.ppl(adversarial)
    if original == adversarial:
        return 0.0
    return after - scorer.ppl(original)


class UnigramPerplexity:
    """Add-one smoothed unigram perplexity.

    Words never seen in the corpus share one extra vocabulary slot.

    Parameters
    ----------
    texts : iterable of :class:`str`
        Corpus the counts are taken from.
    """

    def __init__(self, texts):
        self.counts = Counter(w for t in texts for w in t.split())
        self.total = sum(self.counts.values())
        self.vocabulary = len(self.counts) + 1

    def __call__(self, text):
        words = text.split()
        if not words:
            raise ValueError("Cannot compute the perplexity of empty text.")
        denominator = self.total + self.vocabulary
        logp = math.fsum(math.log((self.counts.get(w, 0) + 1) / denominator) for w in words)
        return math.exp(-logp / len(words))


class LanguageToolCounter:
    """Count grammar errors with LanguageTool.

    Parameters
    ----------
    language : :class:`str`, optional
        LanguageTool language code.
    """

    def __init__(self, language='en-US'):
        try:
            import language_tool_python
        except ImportError:
            raise ScorerUnavailable("language_tool_python is not installed.") from None
        self.tool = language_tool_python.LanguageTool(language)

    def __call__(self, text):
        return len(self.tool.check(text))


class GPT2Perplexity:
    """Perplexity under a causal language model from :mod:`transformers`.

    Parameters
    ----------
    checkpoint : :class:`str`, optional
        Model name or path.
    """

    def __init__(self, checkpoint='gpt2'):
        try:
            import torch
            from transformers import AutoModelForCausalLM, AutoTokenizer
        except ImportError:
            raise ScorerUnavailable("torch and transformers are required for GPT-2 perplexity.") from None
        self._torch = torch
        self.tokenizer = AutoTokenizer.from_pretrained(checkpoint)
        self.model = AutoModelForCausalLM.from_pretrained(checkpoint)
        self.model.eval()

    def __call__(self, text):
        ids = self.tokenizer(text, return_tensors='pt')['input_ids']
        with self._torch.no_grad():
            loss = self.model(ids, labels=ids).loss
        return float(math.exp(loss.item()))


def get_quality_scorer(grammar, perplexity, corpus=()):
    """Build a :class:`QualityScorer` from configuration names.

    Backends that cannot be loaded are left out with a warning.

    Parameters
    ----------
    grammar : :class:`str`
        ``none`` or ``language-tool``.
    perplexity : :class:`str`
        ``none``, ``unigram`` or ``gpt2``.
    corpus : iterable of :class:`str`, optional
        Texts for the unigram model.
    """
    log = get_logger()
    counter, ppl = None, None
    try:
        if grammar == 'language-tool':
            counter = LanguageToolCounter()
        elif grammar != 'none':
            raise ValueError(f"Unknown grammar checker '{grammar}'!")
        if perplexity == 'unigram':
            ppl = UnigramPerplexity(corpus)
        elif perplexity == 'gpt2':
            ppl = GPT2Perplexity()
        elif perplexity != 'none':
            raise ValueError(f"Unknown perplexity model '{perplexity}'!")
    except ScorerUnavailable as e:
        log.warning("%s Metric will be reported as none.", e)
    return QualityScorer(grammar_counter=counter, perplexity=ppl)


def _mean(values):
    return math.fsum(values) / len(values) if values else None


@dataclass(frozen=True)
class MetricsReport:
    """Aggregated metrics of one dataset and victim.
    """
    asr_percent: float
    mean_similarity: Optional[float]
    delta_grammar_errors: Optional[float]
    delta_perplexity: Optional[float]
    n_samples: int
    per_sample: list = field(default_factory=list)
    dataset: str = ''
    victim: str = ''

    def __post_init__(self):
        if not (0.0 <= self.asr_percent <= 100.0):
            raise ValueError(f"ASR {self.asr_percent} outside [0, 100].")
        if self.n_samples != len(self.per_sample):
            raise ValueError("n_samples does not match the per-sample records.")

    def to_dict(self, per_sample=True):
        d = {'dataset': self.dataset,
             'victim': self.victim,
             'n_samples': self.n_samples,
             'asr_percent': self.asr_percent,
             'mean_similarity': self.mean_similarity,
             'delta_grammar_errors': self.delta_grammar_errors,
             'delta_perplexity': self.delta_perplexity,
             'aggregation': AGGREGATION_NOTE}
        if per_sample:
            d['per_sample'] = [o.to_dict() for o in self.per_sample]
        return d

    @classmethod
    def from_dict(cls, data):
        return cls(asr_percent=data['asr_percent'], mean_similarity=data['mean_similarity'],
                   delta_grammar_errors=data['delta_grammar_errors'],
                   delta_perplexity=data['delta_perplexity'], n_samples=data['n_samples'],
                   per_sample=[AttackOutcome.from_dict(o) for o in data.get('per_sample', [])],
                   dataset=data.get('dataset', ''), victim=data.get('victim', ''))


def build_report(outcomes, originals, scorers=None, similarity_scorer=None, dataset='', victim=''):
    """Aggregate outcomes into a :class:`MetricsReport`.

    Parameters
    ----------
    outcomes : :class:`list`
        :class:`~advText.core.AttackOutcome` objects.
    originals : :class:`dict` or :class:`list`
        Original text of each sample, keyed by sample id or aligned with `outcomes`.
    scorers : :class:`QualityScorer`, optional
        Grammar and perplexity backends.
    similarity_scorer : :class:`~advText.reconstruct.SimilarityScorer`, optional
        If set, similarities are recomputed instead of read from the outcomes.
    dataset : :class:`str`, optional
        Dataset name for the report.
    victim : :class:`str`, optional
        Victim name for the report.

    Returns
    -------
    :class:`MetricsReport`
        The report.
    """
    log = get_logger()
    if not isinstance(originals, dict):
        if len(originals) != len(outcomes):
            raise ValueError("outcomes and originals are not aligned.")
        originals = dict((o.sample_id, t) for o, t in zip(outcomes, originals))
    if scorers is None:
        scorers = QualityScorer()
    asr = attack_success_rate(outcomes)
    successes = [o for o in outcomes if o.success]
    similarities, grammar, ppl = [], [], []
    grammar_ok, ppl_ok = True, True
    for o in successes:
        original = originals[o.sample_id]
        if similarity_scorer is None:
            similarities.append(o.final_similarity)
        else:
            similarities.append(similarity(o.adversarial_text, original, similarity_scorer))
        if grammar_ok:
            try:
                grammar.append(delta_grammar(original, o.adversarial_text, scorers))
            except ScorerUnavailable as e:
                log.warning("%s Grammar metric reported as none.", e)
                grammar_ok = False
        if ppl_ok:
            try:
                ppl.append(delta_perplexity(original, o.adversarial_text, scorers))
            except ScorerUnavailable as e:
                log.warning("%s Perplexity metric reported as none.", e)
                ppl_ok = False
    return MetricsReport(asr_percent=asr,
                         mean_similarity=_mean(similarities),
                         delta_grammar_errors=_mean(grammar) if grammar_ok else None,
                         delta_perplexity=_mean(ppl) if ppl_ok else None,
                         n_samples=len(outcomes), per_sample=list(outcomes),
                         dataset=dataset, victim=victim)


def report_table(reports):
    """Summary table with one row per dataset and victim.

    Parameters
    ----------
    reports : :class:`list`
        :class:`MetricsReport` objects.

    Returns
    -------
    :class:`~astropy.table.Table`
        Columns DATASET, VICTIM, N, ASR, SIMILARITY, DELTA_GRAMMAR, DELTA_PPL.
    """
    t = Table()
    t['DATASET'] = [r.dataset for r in reports]
    t['VICTIM'] = [r.victim for r in reports]
    t['N'] = np.array([r.n_samples for r in reports], dtype=np.int64)
    t['ASR'] = np.array([r.asr_percent for r in reports], dtype=np.float64)
    for column, attribute in (('SIMILARITY', 'mean_similarity'),
                              ('DELTA_GRAMMAR', 'delta_grammar_errors'),
                              ('DELTA_PPL', 'delta_perplexity')):
        values = [getattr(r, attribute) for r in reports]
        t[column] = MaskedColumn([0.0 if v is None else v for v in values],
                                 mask=[v is None for v in values], dtype=np.float64)
    for column in ('ASR', 'SIMILARITY', 'DELTA_GRAMMAR', 'DELTA_PPL'):
        t[column].format = '.4f'
    return t


def write_report(reports, directory):
    """Write ``report.json`` and ``report.txt`` to `directory`.

    Parameters
    ----------
    reports : :class:`list`
        :class:`MetricsReport` objects.
    directory : :class:`str`
        Output directory.

    Returns
    -------
    :class:`tuple`
        Paths of the JSON and text files.
    """
    log = get_logger()
    json_file = os.path.join(directory, 'report.json')
    text_file = os.path.join(directory, 'report.txt')
    with open(json_file, 'w') as j:
        json.dump([r.to_dict() for r in reports], j, indent=1)
    with open(text_file, 'w') as txt:
        txt.write(f"# {AGGREGATION_NOTE}\n")
        report_table(reports).write(txt, format='ascii.fixed_width')
    log.info("Wrote %s and %s.", json_file, text_file)
    return json_file, text_file
