# Licensed under a 3-clause BSD style license - see LICENSE.rst
# -*- coding: utf-8 -*-
"""
advText.reconstruct
===================

Decode perturbed hidden states to candidate token sequences and apply the
validity gates: novelty, similarity and antonym filtering.
"""
from abc import ABC, abstractmethod
from collections import defaultdict

import numpy as np
from desiutil.log import get_logger

from .core import TokenSequence, ScorerUnavailable, ParseError


def decode_tokens(logits, original, exclude=()):
    """Argmax decode of MLM logits.

    Parameters
    ----------
    logits : :class:`numpy.ndarray`
        Logits ``[seq_len, vocab_size]``.
    original : :class:`~advText.core.TokenSequence`
        Sequence being perturbed; special positions are copied from it.
    exclude : iterable of :class:`int`, optional
        Vocabulary ids never selected at non-special positions.

    Returns
    -------
    :class:`~advText.core.TokenSequence`
        The decoded sequence, with an empty surface string.
    """
    logits = np.array(logits, dtype=np.float64)
    if logits.shape[0] != len(original):
        raise ValueError(f"Logits for {logits.shape[0]:d} positions, sequence has {len(original):d}.")
    exclude = list(exclude)
    if exclude:
        logits[:, exclude] = -np.inf
    # np.argmax returns the first maximum, i.e. the lowest id on ties.
    best = np.argmax(logits, axis=1)
    ids = tuple(int(o) if s else int(b) for o, s, b in
                zip(original.token_ids, original.special_mask, best))
    return TokenSequence(ids, original.special_mask)


def is_novel(candidate, previous):
    """``True`` if `candidate` differs from every sequence in `previous`.

    Parameters
    ----------
    candidate : :class:`~advText.core.TokenSequence`
        Decoded sequence.
    previous : :class:`set`
        Token-id tuples decoded so far.
    """
    return candidate.key not in previous


def accept_adversary(candidate, threshold):
    """Final acceptance test of a flipped candidate (strict inequality).

    Parameters
    ----------
    candidate : :class:`~advText.core.CandidateAdversary`
        A queried candidate.
    threshold : :class:`float`
        Similarity threshold.

    Returns
    -------
    :class:`bool`
    """
    return candidate.similarity_to_original > threshold


class SimilarityScorer(ABC):
    """Sentence similarity in [-1, 1].
    """
    name = 'scorer'

    @abstractmethod
    def score(self, a, b):
        raise NotImplementedError


class MeanEmbeddingCosine(SimilarityScorer):
    """Cosine between mean token embeddings of the local model.

    Parameters
    ----------
    model : :class:`~advText.model.LocalModelHandle`
        Model whose embedding layer is used.
    """
    name = 'mean-embed-cosine'

    def __init__(self, model):
        self.model = model

    def score(self, a, b):
        u = self.model.mean_embedding(a)
        v = self.model.mean_embedding(b)
        nu, nv = np.linalg.norm(u), np.linalg.norm(v)
        if nu == 0 or nv == 0:
            return 0.0
        # Sum in a fixed order so that score(a, b) == score(b, a) exactly.
        c = float(np.sum(u * v)) / (nu * nv)
        return min(1.0, max(-1.0, c))


class UniversalSentenceEncoder(SimilarityScorer):
    """Universal Sentence Encoder scorer loaded through :mod:`tensorflow_hub`.

    The score is the angular similarity ``1 - arccos(cos)/pi`` mapped back
    to [-1, 1], so identical sentences score 1.

    Parameters
    ----------
    url : :class:`str`, optional
        Hub handle or local path of the encoder.
    """
    name = 'external-sentence-encoder'
    default_url = 'https://tfhub.dev/google/universal-sentence-encoder/4'

    def __init__(self, url=None):
        try:
            import tensorflow_hub as hub
        except ImportError:
            raise ScorerUnavailable("tensorflow_hub is not installed.") from None
        self.url = self.default_url if url is None else url
        log = get_logger()
        log.info("Loading sentence encoder from %s.", self.url)
        self._encode = hub.load(self.url)
        self._cache = dict()

    def _vector(self, text):
        if text not in self._cache:
            v = np.asarray(self._encode([text])[0], dtype=np.float64)
            self._cache[text] = v / np.linalg.norm(v)
        return self._cache[text]

    def score(self, a, b):
        c = float(np.clip(np.sum(self._vector(a) * self._vector(b)), -1.0, 1.0))
        return 1.0 - 2.0*np.arccos(c)/np.pi


def get_scorer(name, model):
    """Build a similarity scorer from its configuration name.
    """
    if name == MeanEmbeddingCosine.name:
        return MeanEmbeddingCosine(model)
    if name == UniversalSentenceEncoder.name:
        return UniversalSentenceEncoder()
    raise ValueError(f"Unknown similarity scorer '{name}'!")


def similarity(a, b, scorer):
    """Similarity of two nonempty texts under `scorer`.
    """
    if not a.strip() or not b.strip():
        raise ValueError("Cannot score empty text.")
    return scorer.score(a, b)


class AntonymLexicon:
    """Map from a word to the set of its antonyms.

    Lookups are case-insensitive; unknown words have no antonyms.

    Parameters
    ----------
    entries : :class:`dict`, optional
        Initial entries, word to iterable of antonyms.
    """

    def __init__(self, entries=None):
        self._entries = defaultdict(set)
        if entries is not None:
            for word, antonyms in entries.items():
                self._entries[word.lower()] |= set(a.lower() for a in antonyms)

    def __len__(self):
        return len(self._entries)

    def __contains__(self, word):
        return word.lower() in self._entries

    def antonyms(self, word):
        """Antonyms of `word`, possibly empty.
        """
        return frozenset(self._entries.get(word.lower(), ()))

    def is_antonym(self, word, other):
        return other.lower() in self.antonyms(word)

    def write(self, filename):
        """Write the lexicon as ``word<TAB>antonym`` lines.
        """
        with open(filename, 'w') as out:
            for word in sorted(self._entries):
                for a in sorted(self._entries[word]):
                    out.write(f"{word}\t{a}\n")


def read_lexicon(filename):
    """Read an antonym file.

    Blank lines and lines starting with ``#`` are ignored.

    Parameters
    ----------
    filename : :class:`str`
        File of ``word<TAB>antonym`` lines.

    Returns
    -------
    :class:`AntonymLexicon`
        The lexicon.

    Raises
    ------
    :exc:`~advText.core.ParseError`
        If a line does not hold exactly two fields.
    """
    log = get_logger()
    entries = defaultdict(set)
    with open(filename) as f:
        for k, line in enumerate(f):
            line = line.strip()
            if not line or line.startswith('#'):
                continue
            fields = line.split('\t')
            if len(fields) != 2 or not fields[0].strip() or not fields[1].strip():
                raise ParseError(k + 1, f"{filename}: expected 'word<TAB>antonym'.")
            entries[fields[0].strip()].add(fields[1].strip())
    log.info("Read antonyms for %d words from %s.", len(entries), filename)
    return AntonymLexicon(entries)


def build_wordnet_lexicon(words):
    """Collect WordNet antonyms of `words`.

    Antonymy is recorded in both directions.

    Parameters
    ----------
    words : iterable of :class:`str`
        Words to look up.

    Returns
    -------
    :class:`AntonymLexicon`
        The lexicon.

    Raises
    ------
    :exc:`~advText.core.ScorerUnavailable`
        If :mod:`nltk` or its WordNet corpus is missing.
    """
    try:
        from nltk.corpus import wordnet as wn
        wn.ensure_loaded()
    except (ImportError, LookupError) as e:
        raise ScorerUnavailable(f"WordNet is not available: {e}") from None
    entries = defaultdict(set)
    for word in words:
        w = word.lower()
        for synset in wn.synsets(w):
            for lemma in synset.lemmas():
                for a in lemma.antonyms():
                    name = a.name().lower()
                    if name != w:
                        entries[w].add(name)
                        entries[name].add(w)
    return AntonymLexicon(entries)


def antonym_filter(original, candidate, lex, model):
    """Reject candidates that replace a word by one of its antonyms.

    A changed token implicates the whole word it belongs to; the words of
    `original` and `candidate` are compared unit by unit.

    Parameters
    ----------
    original : :class:`~advText.core.TokenSequence`
        Sequence the attack started from.
    candidate : :class:`~advText.core.TokenSequence`
        Decoded candidate, same length.
    lex : :class:`AntonymLexicon`
        Antonyms.
    model : :class:`~advText.model.LocalModelHandle`
        Supplies the grouping of positions into words.

    Returns
    -------
    :class:`bool`
        ``False`` to reject, ``True`` to accept.
    """
    if len(original) != len(candidate):
        raise ValueError("Sequences differ in length.")
    changed = set(i for i, (a, b) in enumerate(zip(original.token_ids, candidate.token_ids)) if a != b)
    if not changed or len(lex) == 0:
        return True
    after = model.word_units(candidate)
    for word, positions in model.word_units(original):
        if changed.isdisjoint(positions):
            continue
        for new, p in after:
            if not set(p).isdisjoint(positions) and lex.is_antonym(word, new):
                return False
    return True
