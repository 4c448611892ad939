# Licensed under a 3-clause BSD style license - see LICENSE.rst
# -*- coding: utf-8 -*-
"""
advText.model
=============

Interface between the attack and the attacker's local model.

The local model is split into three parts: an embedding layer
(:meth:`LocalModelHandle.embed`), the hidden layers that map embeddings
to hidden states (:meth:`LocalModelHandle.forward_hidden`) and the rest
of the network that produces class logits (:meth:`LocalModelHandle.task_logits`).
A masked-language-model head (:meth:`LocalModelHandle.mlm_logits`) maps the
same hidden states back to per-position vocabulary logits.
"""
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from .core import ModelError


@dataclass(frozen=True, eq=False)
class HiddenStates:
    """Hidden states of one sequence, shape ``[seq_len, d_h]``.
    """
    states: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.states, dtype=np.float64)
        if s.ndim != 2:
            raise ValueError(f"Hidden states must be two-dimensional, got shape {s.shape}.")
        if not np.all(np.isfinite(s)):
            raise ValueError("Hidden states contain non-finite values.")
        object.__setattr__(self, 'states', s)

    @property
    def seq_len(self):
        return self.states.shape[0]


class LocalModelHandle(ABC):
    """Read-only handle on a local encoder with task and MLM heads.

    Implementations are immutable after construction, so one handle can be
    shared by attack sessions running in parallel.

    Attributes
    ----------
    name : :class:`str`
        Short description used in run manifests.
    source : :class:`str`
        Configuration name the handle was loaded from.
    vocab_size : :class:`int`
        Number of vocabulary entries of the MLM head.
    d : :class:`int`
        Width of token embeddings.
    num_classes : :class:`int`
        Number of task classes.
    mask_token_id : :class:`int`
        Id of the mask token.
    special_token_ids : :class:`frozenset`
        Ids never produced by decoding at non-special positions.
    """
    name = 'local'
    source = ''
    vocab_size = 0
    d = 0
    num_classes = 0
    mask_token_id = 0
    special_token_ids = frozenset()

    @abstractmethod
    def tokenize(self, text_a, text_b=None):
        """Convert text (or a text pair) to a :class:`~advText.core.TokenSequence`.
        """
        raise NotImplementedError

    @abstractmethod
    def detokenize(self, tokens):
        """Convert a :class:`~advText.core.TokenSequence` back to ``(text_a, text_b)``.

        `text_b` is ``None`` for single-text sequences.
        """
        raise NotImplementedError

    @abstractmethod
    def word_units(self, tokens):
        """Group non-special positions into words.

        Returns
        -------
        :class:`list`
            A list of ``(word, positions)`` tuples in sequence order.
        """
        raise NotImplementedError

    @abstractmethod
    def embed(self, tokens):
        """Look up token embeddings, returning :class:`~advText.core.EmbeddedInput`.
        """
        raise NotImplementedError

    @abstractmethod
    def forward_hidden(self, emb):
        """Propagate embeddings to the hidden states fed to both heads.
        """
        raise NotImplementedError

    @abstractmethod
    def task_logits(self, h):
        """Class logits, a vector of length :attr:`num_classes`.
        """
        raise NotImplementedError

    @abstractmethod
    def mlm_logits(self, h):
        """Vocabulary logits, a matrix ``[seq_len, vocab_size]``.
        """
        raise NotImplementedError

    @abstractmethod
    def loss_and_grad(self, emb, delta, gold, beta, targets=None):
        """Composite loss at ``E + delta`` and its gradient with respect to `delta`.

        Parameters
        ----------
        emb : :class:`~advText.core.EmbeddedInput`
            Unperturbed embeddings ``E``.
        delta : :class:`numpy.ndarray`
            Perturbation, same shape as ``emb.embeddings``.
        gold : :class:`int`
            Gold label for the task loss.
        beta : :class:`float`
            Weight of the MLM loss.
        targets : sequence of :class:`int`, optional
            Token ids scored by the MLM loss; defaults to ``emb.tokens``.

        Returns
        -------
        :class:`tuple`
            ``(loss, grad)``.

        Raises
        ------
        :exc:`~advText.core.NonFiniteLoss`
            If the forward pass is not finite.
        """
        raise NotImplementedError

    def predict(self, text_a, text_b=None):
        """Predicted label of the task head, used by in-process victims.
        """
        tokens = self.tokenize(text_a, text_b)
        logits = self.task_logits(self.forward_hidden(self.embed(tokens)))
        return int(np.argmax(logits))

    def mean_embedding(self, text):
        """Mean token embedding of `text`, used for desk-scale similarity.
        """
        return self.embed(self.tokenize(text)).embeddings.mean(axis=0)


def get_local_model(name, hidden_layer=-1, mlm_model=None):
    """Resolve a model name from the configuration.

    Parameters
    ----------
    name : :class:`str`
        ``tiny``, ``tiny:PATH`` or ``hf:CHECKPOINT``.
    hidden_layer : :class:`int`, optional
        Encoder layer fed to the MLM head (default final layer).
    mlm_model : :class:`str`, optional
        Masked-LM checkpoint supplying the MLM head of ``hf:`` models.

    Returns
    -------
    :class:`LocalModelHandle`
        The loaded model.

    Raises
    ------
    :exc:`~advText.core.ModelError`
        If `name` is not recognized.
    """
    if name == 'tiny':
        from .tiny import TinyModel
        model = TinyModel.build()
    elif name.startswith('tiny:'):
        from .tiny import TinyModel
        model = TinyModel.load(name[5:])
    elif name.startswith('hf:'):
        from .hf import TransformerModel
        model = TransformerModel(name[3:], hidden_layer=hidden_layer, mlm_checkpoint=mlm_model or None)
    else:
        raise ModelError(f"Unknown local model '{name}'!")
    model.source = name
    return model
