# Licensed under a 3-clause BSD style license - see LICENSE.rst
# -*- coding: utf-8 -*-
"""
advText.tiny
============

A small, deterministic reference model with closed-form gradients.

The model has a 64-entry whitespace vocabulary: four special tokens and
sixty words, of which twenty carry positive polarity, twenty negative
polarity and twenty none.  Word embeddings are built from orthonormal
directions :math:`q_v` plus a shared polarity axis :math:`w`:

.. math::

    E_v = a q_v + b p_v w, \\quad a = \\sqrt{1 - b^2}

where :math:`p_v \\in \\{-1, 0, +1\\}`.  One bilinear block mixes each token
with the sequence mean,

.. math::

    H = Z A + \\bar{Z} C + \\mathbf{1} c^T,

a linear task head acts on the mean hidden state, and the MLM head shares
the embedding table, :math:`M = \\tau H E^T + m`.  Because the table rows
are nearly orthogonal, the MLM head decodes every unperturbed input back to
itself.

The default task head labels a sentence positive (class 1) when the sum of
word polarities is positive, so the generated corpus is linearly separable.
"""
import json

import numpy as np
from desiutil.log import get_logger

from .core import (LabeledSample, TokenSequence, EmbeddedInput,
                   TokenizationError, ModelError, NonFiniteLoss)
from .model import HiddenStates, LocalModelHandle
from .engine import composite_loss


SPECIAL_TOKENS = ('[PAD]', '[CLS]', '[SEP]', '[MASK]')
PAD_ID, CLS_ID, SEP_ID, MASK_ID = range(4)

POSITIVE_WORDS = ('good', 'great', 'fine', 'nice', 'superb',
                  'excellent', 'brilliant', 'lovely', 'wonderful', 'charming',
                  'pleasant', 'delightful', 'clever', 'fresh', 'bright',
                  'warm', 'happy', 'solid', 'smart', 'strong')

NEGATIVE_WORDS = ('bad', 'awful', 'poor', 'dull', 'terrible',
                  'boring', 'weak', 'bland', 'clumsy', 'messy',
                  'tedious', 'sloppy', 'stale', 'dreary', 'grim',
                  'cold', 'sad', 'shallow', 'silly', 'ugly')

NEUTRAL_WORDS = ('the', 'a', 'movie', 'film', 'plot',
                 'story', 'cast', 'script', 'scene', 'actor',
                 'music', 'pace', 'ending', 'director', 'this',
                 'is', 'was', 'very', 'quite', 'rather')

VOCABULARY = SPECIAL_TOKENS + POSITIVE_WORDS + NEGATIVE_WORDS + NEUTRAL_WORDS

DEFAULT_SEED = 20230
DEFAULT_WIDTH = 80
POLARITY_WEIGHT = 0.3
CONTEXT_WEIGHT = 0.25
TASK_SCALE = 20.0
MLM_SCALE = 20.0


def polarity(word):
    """Polarity of a vocabulary word: +1, -1 or 0.
    """
    if word in POSITIVE_WORDS:
        return 1
    if word in NEGATIVE_WORDS:
        return -1
    return 0


def _log_softmax(x):
    m = np.max(x, axis=-1, keepdims=True)
    s = x - m
    return s - np.log(np.sum(np.exp(s), axis=-1, keepdims=True))


class TinyModel(LocalModelHandle):
    """Reference model with a single bilinear block.

    Parameters
    ----------
    vocabulary : sequence of :class:`str`
        Token strings; the first four must be the special tokens.
    embedding : :class:`numpy.ndarray`
        Embedding table ``[vocab_size, d]``, shared with the MLM head.
    mixing : :class:`numpy.ndarray`
        Per-token matrix ``A``, ``[d, d]``.
    context : :class:`numpy.ndarray`
        Sequence-mean matrix ``C``, ``[d, d]``.
    bias : :class:`numpy.ndarray`
        Hidden bias, ``[d]``.
    task_weight : :class:`numpy.ndarray`
        Classification weights ``[d, num_classes]``.
    task_bias : :class:`numpy.ndarray`
        Classification bias ``[num_classes]``.
    mlm_scale : :class:`float`, optional
        Temperature of the tied MLM head.
    mlm_bias : :class:`numpy.ndarray`, optional
        MLM bias ``[vocab_size]``, zero by default.
    seed : :class:`int`, optional
        Seed the model was built from, recorded in saved files.
    """

    def __init__(self, vocabulary, embedding, mixing, context, bias,
                 task_weight, task_bias, mlm_scale=MLM_SCALE, mlm_bias=None, seed=0):
        self.vocabulary = tuple(vocabulary)
        if self.vocabulary[:len(SPECIAL_TOKENS)] != SPECIAL_TOKENS:
            raise ModelError("The vocabulary must start with the special tokens.")
        self._index = dict((w, i) for i, w in enumerate(self.vocabulary))
        self._embedding = self._frozen(embedding, 2)
        self.vocab_size, self.d = self._embedding.shape
        if self.vocab_size != len(self.vocabulary):
            raise ModelError("Embedding table and vocabulary differ in size.")
        self._mixing = self._frozen(mixing, 2)
        self._context = self._frozen(context, 2)
        self._bias = self._frozen(bias, 1)
        self._task_weight = self._frozen(task_weight, 2)
        self._task_bias = self._frozen(task_bias, 1)
        self.num_classes = self._task_weight.shape[1]
        self.mlm_scale = float(mlm_scale)
        self._mlm_bias = self._frozen(np.zeros(self.vocab_size) if mlm_bias is None else mlm_bias, 1)
        for name, shape in (('mixing', (self.d, self.d)), ('context', (self.d, self.d)),
                            ('bias', (self.d,)), ('task_weight', (self.d, self.num_classes)),
                            ('task_bias', (self.num_classes,)), ('mlm_bias', (self.vocab_size,))):
            if getattr(self, '_' + name).shape != shape:
                raise ModelError(f"Parameter {name} has shape {getattr(self, '_' + name).shape}, expected {shape}.")
        self.seed = int(seed)
        self.mask_token_id = MASK_ID
        self.special_token_ids = frozenset((PAD_ID, CLS_ID, SEP_ID, MASK_ID))
        self.name = f"tiny(seed={self.seed:d})"

    @staticmethod
    def _frozen(x, ndim):
        a = np.array(x, dtype=np.float64)
        if a.ndim != ndim:
            raise ModelError(f"Expected a {ndim:d}-dimensional parameter, got shape {a.shape}.")
        a.setflags(write=False)
        return a

    @classmethod
    def build(cls, seed=DEFAULT_SEED, d=DEFAULT_WIDTH, polarity_weight=POLARITY_WEIGHT,
              context_weight=CONTEXT_WEIGHT, task_scale=TASK_SCALE, mlm_scale=MLM_SCALE):
        """Construct the reference model over :data:`VOCABULARY`.

        Parameters
        ----------
        seed : :class:`int`, optional
            Seed of the orthonormal directions.
        d : :class:`int`, optional
            Embedding width; must exceed the vocabulary size.
        polarity_weight : :class:`float`, optional
            Weight `b` of the polarity axis in polar word embeddings.
        context_weight : :class:`float`, optional
            Scale of the sequence-mean term of the encoder.
        task_scale : :class:`float`, optional
            Norm of the class weight vectors.
        mlm_scale : :class:`float`, optional
            Temperature of the MLM head.

        Returns
        -------
        :class:`TinyModel`
            The model.
        """
        V = len(VOCABULARY)
        if d <= V:
            raise ModelError(f"Width {d:d} must exceed the vocabulary size {V:d}.")
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        axis = q[:, V]
        a = np.sqrt(1.0 - polarity_weight**2)
        embedding = np.empty((V, d), dtype=np.float64)
        for v, word in enumerate(VOCABULARY):
            p = polarity(word)
            if p == 0:
                embedding[v] = q[:, v]
            else:
                embedding[v] = a*q[:, v] + polarity_weight*p*axis
        task_weight = np.stack([-task_scale*axis, task_scale*axis], axis=1)
        return cls(VOCABULARY, embedding, np.eye(d), context_weight*np.eye(d), np.zeros(d),
                   task_weight, np.zeros(2), mlm_scale=mlm_scale, seed=seed)

    def _replace(self, **kwargs):
        params = dict(vocabulary=self.vocabulary, embedding=self._embedding,
                      mixing=self._mixing, context=self._context, bias=self._bias,
                      task_weight=self._task_weight, task_bias=self._task_bias,
                      mlm_scale=self.mlm_scale, mlm_bias=self._mlm_bias, seed=self.seed)
        params.update(kwargs)
        return TinyModel(**params)

    @property
    def embedding_table(self):
        """Read-only embedding table.
        """
        return self._embedding

    #
    # Text.
    #
    def _words(self, text):
        words = text.split()
        if not words:
            raise TokenizationError("Cannot tokenize empty text.")
        ids = []
        for w in words:
            if w not in self._index or self._index[w] in (PAD_ID, CLS_ID, SEP_ID):
                raise TokenizationError(f"Word '{w}' is not in the vocabulary.")
            ids.append(self._index[w])
        return ids

    def tokenize(self, text_a, text_b=None):
        ids = [CLS_ID] + self._words(text_a) + [SEP_ID]
        if text_b is not None:
            ids += self._words(text_b) + [SEP_ID]
        tokens = TokenSequence(tuple(ids), tuple(i in (CLS_ID, SEP_ID) for i in ids))
        return TokenSequence(tokens.token_ids, tokens.special_mask, self._surface(tokens))

    def _segments(self, tokens):
        segments, current = [], []
        for t, s in zip(tokens.token_ids, tokens.special_mask):
            if s:
                if t == SEP_ID and current:
                    segments.append(' '.join(current))
                    current = []
            else:
                if not (0 <= t < self.vocab_size):
                    raise ModelError(f"Invalid token id {t:d}.")
                current.append(self.vocabulary[t])
        if current:
            segments.append(' '.join(current))
        return segments

    def _surface(self, tokens):
        return ' '.join(self._segments(tokens))

    def detokenize(self, tokens):
        segments = self._segments(tokens)
        if not segments:
            return ('', None)
        if len(segments) == 1:
            return (segments[0], None)
        return (segments[0], ' '.join(segments[1:]))

    def word_units(self, tokens):
        return [(self.vocabulary[t], [i]) for i, (t, s) in
                enumerate(zip(tokens.token_ids, tokens.special_mask)) if not s]

    #
    # Network.
    #
    def embed(self, tokens):
        ids = np.array(tokens.token_ids, dtype=np.int64)
        if np.any(ids < 0) or np.any(ids >= self.vocab_size):
            raise ModelError("Token id outside the vocabulary.")
        return EmbeddedInput(self._embedding[ids], tokens)

    def _hidden(self, z):
        return z @ self._mixing + z.mean(axis=0) @ self._context + self._bias

    def forward_hidden(self, emb):
        return HiddenStates(self._hidden(emb.embeddings))

    def _pooled(self, h):
        return h.mean(axis=0)

    def task_logits(self, h):
        return self._pooled(h.states) @ self._task_weight + self._task_bias

    def mlm_logits(self, h):
        return self.mlm_scale * (h.states @ self._embedding.T) + self._mlm_bias

    def losses(self, emb, delta, gold, targets=None):
        """Task loss and MLM loss at ``E + delta``.

        Returns
        -------
        :class:`tuple`
            ``(task_loss, mlm_loss)``.
        """
        task_loss, mlm_loss, _ = self._forward(emb, delta, gold, targets)
        return task_loss, mlm_loss

    def _forward(self, emb, delta, gold, targets):
        delta = np.asarray(delta, dtype=np.float64)
        if delta.shape != emb.embeddings.shape:
            raise ValueError(f"Perturbation shape {delta.shape} does not match {emb.embeddings.shape}.")
        if not (0 <= gold < self.num_classes):
            raise ValueError(f"Gold label {gold} outside [0, {self.num_classes:d}).")
        t = np.array(emb.tokens.token_ids if targets is None else targets, dtype=np.int64)
        if t.shape != (emb.seq_len,):
            raise ValueError("Targets must have one entry per position.")
        rows = np.flatnonzero(~emb.tokens.special)
        with np.errstate(all='ignore'):
            z = emb.embeddings + delta
            h = self._hidden(z)
            y = self._pooled(h) @ self._task_weight + self._task_bias
            ly = _log_softmax(y)
            task_loss = -ly[gold]
            if len(rows) > 0:
                m = self.mlm_scale * (h[rows] @ self._embedding.T) + self._mlm_bias[np.newaxis, :]
                lm = _log_softmax(m)
                mlm_loss = -np.mean(lm[np.arange(len(rows)), t[rows]])
            else:
                lm = None
                mlm_loss = 0.0
        if not (np.isfinite(task_loss) and np.isfinite(mlm_loss)):
            raise NonFiniteLoss("Forward pass produced a non-finite loss.")
        return float(task_loss), float(mlm_loss), (z, h, ly, lm, rows, t)

    def loss_and_grad(self, emb, delta, gold, beta, targets=None):
        task_loss, mlm_loss, (z, h, ly, lm, rows, t) = self._forward(emb, delta, gold, targets)
        n = z.shape[0]
        with np.errstate(all='ignore'):
            gy = np.exp(ly)
            gy[gold] -= 1.0
            grad_h = np.tile(self._task_weight @ gy / n, (n, 1))
            if lm is not None and beta != 0:
                gm = np.exp(lm)
                gm[np.arange(len(rows)), t[rows]] -= 1.0
                gm /= len(rows)
                grad_h[rows] += beta * self.mlm_scale * (gm @ self._embedding)
            grad = grad_h @ self._mixing.T + grad_h.mean(axis=0) @ self._context.T
        if not np.all(np.isfinite(grad)):
            raise NonFiniteLoss("Gradient contains non-finite values.")
        return composite_loss(task_loss, mlm_loss, beta), grad

    #
    # Training and persistence.
    #
    def fit_task_head(self, samples, steps=2000, learning_rate=5.0, l2=1e-4):
        """Refit the classification head by full-batch gradient descent.

        The encoder and embeddings are left untouched; the head starts from
        zero, so the result depends only on `samples` and the arguments.

        Parameters
        ----------
        samples : :class:`list`
            :class:`~advText.core.LabeledSample` objects.
        steps : :class:`int`, optional
            Number of gradient steps.
        learning_rate : :class:`float`, optional
            Step size.
        l2 : :class:`float`, optional
            Weight decay on the head weights.

        Returns
        -------
        :class:`TinyModel`
            A new model with the fitted head.
        """
        log = get_logger()
        x = np.array([self._pooled(self._hidden(self.embed(self.tokenize(s.text_a, s.text_b)).embeddings))
                      for s in samples])
        y = np.zeros((len(samples), self.num_classes))
        y[np.arange(len(samples)), [s.gold_label for s in samples]] = 1.0
        w = np.zeros((self.d, self.num_classes))
        b = np.zeros(self.num_classes)
        for step in range(steps):
            p = np.exp(_log_softmax(x @ w + b))
            g = (p - y) / len(samples)
            w -= learning_rate * (x.T @ g + l2 * w)
            b -= learning_rate * g.sum(axis=0)
        accuracy = np.mean(np.argmax(x @ w + b, axis=1) == np.argmax(y, axis=1))
        log.info("Fitted task head on %d samples, training accuracy %.3f.", len(samples), accuracy)
        return self._replace(task_weight=w, task_bias=b)

    def _flat(self):
        return np.concatenate([[self.mlm_scale], self._embedding.ravel(), self._mixing.ravel(),
                               self._context.ravel(), self._bias, self._task_weight.ravel(),
                               self._task_bias, self._mlm_bias])

    def save(self, filename):
        """Write the model as a header plus one flat parameter array.

        Parameters
        ----------
        filename : :class:`str`
            Output ``.npz`` file.
        """
        np.savez(filename,
                 header=np.array([self.d, self.vocab_size, self.num_classes, self.seed], dtype=np.int64),
                 params=self._flat(),
                 vocabulary=np.array(self.vocabulary))

    @classmethod
    def load(cls, filename):
        """Read a model written by :meth:`save`.

        Raises
        ------
        :exc:`FileNotFoundError`
            If `filename` does not exist.
        :exc:`~advText.core.ModelError`
            If the header and parameters disagree.
        """
        with np.load(filename, allow_pickle=False) as f:
            d, V, K, seed = (int(x) for x in f['header'])
            params = np.array(f['params'])
            vocabulary = [str(w) for w in f['vocabulary']]
        sizes = [1, V*d, d*d, d*d, d, d*K, K, V]
        if params.size != sum(sizes) or len(vocabulary) != V:
            raise ModelError(f"{filename} does not match its header (d={d:d}, V={V:d}, K={K:d}).")
        parts = np.split(params, np.cumsum(sizes)[:-1])
        return cls(vocabulary, parts[1].reshape(V, d), parts[2].reshape(d, d),
                   parts[3].reshape(d, d), parts[4], parts[5].reshape(d, K), parts[6],
                   mlm_scale=parts[0][0], mlm_bias=parts[7], seed=seed)


def generate_corpus(n, seed=DEFAULT_SEED, pair_fraction=0.2):
    """Generate a linearly separable two-class corpus over :data:`VOCABULARY`.

    Every sentence has three to six words.  Most sentences hold one polar
    word among neutral words; a fraction `pair_fraction` of those with at
    least four words holds two words of the majority polarity and one of
    the other.  The polarity sum is always +1 or -1 and fixes the label.

    Parameters
    ----------
    n : :class:`int`
        Number of samples.
    seed : :class:`int`, optional
        Random seed.
    pair_fraction : :class:`float`, optional
        Fraction of sentences with three polar words.

    Returns
    -------
    :class:`list`
        A list of :class:`~advText.core.LabeledSample`.
    """
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        k = int(rng.integers(3, 7))
        label = int(rng.integers(0, 2))
        major, minor = (POSITIVE_WORDS, NEGATIVE_WORDS) if label else (NEGATIVE_WORDS, POSITIVE_WORDS)
        if k >= 4 and rng.random() < pair_fraction:
            words = list(rng.choice(major, 2)) + [rng.choice(minor)]
        else:
            words = [rng.choice(major)]
        words += list(rng.choice(NEUTRAL_WORDS, k - len(words)))
        words = [str(w) for w in rng.permutation(words)]
        samples.append(LabeledSample(id=f"syn-{i:05d}", text_a=' '.join(words),
                                     gold_label=label, num_classes=2))
    return samples


def write_dataset(samples, filename):
    """Write samples as canonical JSON-lines.

    Parameters
    ----------
    samples : :class:`list`
        :class:`~advText.core.LabeledSample` objects.
    filename : :class:`str`
        Output file.
    """
    with open(filename, 'w') as out:
        for s in samples:
            row = {'id': s.id, 'text_a': s.text_a}
            if s.text_b is not None:
                row['text_b'] = s.text_b
            row['label'] = s.gold_label
            out.write(json.dumps(row) + '\n')


def substitution_oracle(sample, model):
    """Test whether any single-word substitution flips the model.

    Parameters
    ----------
    sample : :class:`~advText.core.LabeledSample`
        Sample to check.
    model : :class:`TinyModel`
        Model playing the victim.

    Returns
    -------
    :class:`bool`
        ``True`` if some substitution at one position changes the predicted
        label away from the gold label.
    """
    tokens = model.tokenize(sample.text_a, sample.text_b)
    words = [v for v in range(model.vocab_size) if v not in model.special_token_ids]
    for i in tokens.maskable:
        for v in words:
            if v == tokens.token_ids[i]:
                continue
            candidate = tokens.replace(i, v)
            logits = model.task_logits(model.forward_hidden(model.embed(candidate)))
            if int(np.argmax(logits)) != sample.gold_label:
                return True
    return False


def check_gradient(model, emb, delta, gold, beta, h=1e-4, directions=4, rng=None, targets=None):
    """Compare analytic and numerical directional derivatives.

    Numerical derivatives are central differences with step `h`, refined
    with one Richardson extrapolation using step ``h/2``.

    Parameters
    ----------
    model : :class:`~advText.model.LocalModelHandle`
        Model to check.
    emb : :class:`~advText.core.EmbeddedInput`
        Clean embeddings.
    delta : :class:`numpy.ndarray`
        Perturbation at which to check.
    gold : :class:`int`
        Gold label.
    beta : :class:`float`
        MLM loss weight.
    h : :class:`float`, optional
        Difference step.
    directions : :class:`int`, optional
        Number of random unit directions.
    rng : :class:`numpy.random.Generator`, optional
        Source of the directions.
    targets : sequence of :class:`int`, optional
        MLM targets.

    Returns
    -------
    :class:`float`
        Maximum relative error over the directions.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    _, grad = model.loss_and_grad(emb, delta, gold, beta, targets=targets)

    def loss(d):
        return model.loss_and_grad(emb, d, gold, beta, targets=targets)[0]

    def central(u, step):
        return (loss(delta + step*u) - loss(delta - step*u)) / (2*step)

    worst = 0.0
    for k in range(directions):
        u = rng.standard_normal(delta.shape)
        u /= np.linalg.norm(u)
        numeric = (4*central(u, h/2) - central(u, h)) / 3
        analytic = float(np.sum(grad * u))
        error = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-6)
        worst = max(worst, error)
    return worst
