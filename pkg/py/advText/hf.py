# Licensed under a 3-clause BSD style license - see LICENSE.rst
# -*- coding: utf-8 -*-
"""
advText.hf
==========

Adapter for BERT-family checkpoints from :mod:`transformers`.

A fine-tuned sequence classifier supplies the embedding layer, the encoder
and the classification head; a masked-LM checkpoint of the same family
supplies the MLM head, applied to the classifier's hidden states.
Gradients come from :mod:`torch` autograd.  :mod:`torch` and
:mod:`transformers` are imported when a model is created.
"""
from dataclasses import dataclass

import numpy as np
from desiutil.log import get_logger

from .core import TokenSequence, EmbeddedInput, ModelError, NonFiniteLoss
from .model import HiddenStates, LocalModelHandle
from .engine import composite_loss


@dataclass(frozen=True, eq=False)
class TransformerHiddenStates(HiddenStates):
    """Hidden states fed to the MLM head, plus the final-layer states for the task head.
    """
    final: np.ndarray = None


def missing_head_weights(loading_info, prefixes=('cls.', 'lm_head.')):
    """Names of MLM head weights a checkpoint did not provide.

    Parameters
    ----------
    loading_info : :class:`dict`
        Loading report of ``from_pretrained(..., output_loading_info=True)``.
    prefixes : :class:`tuple`, optional
        Parameter name prefixes of MLM heads.

    Returns
    -------
    :class:`list`
        Sorted parameter names; empty if the head was loaded completely.
    """
    return sorted(k for k in loading_info.get('missing_keys', []) if k.startswith(prefixes))


class TransformerModel(LocalModelHandle):
    """Local model backed by a pretrained transformer.

    Parameters
    ----------
    checkpoint : :class:`str`
        Fine-tuned sequence-classification checkpoint (path or hub name).
    hidden_layer : :class:`int`, optional
        Index into the encoder's hidden states fed to the MLM head;
        -1 is the final layer.
    mlm_checkpoint : :class:`str`, optional
        Masked-LM checkpoint.  By default the classifier checkpoint itself,
        which then has to hold trained MLM head weights.

    Raises
    ------
    :exc:`~advText.core.ModelError`
        If the backends are missing or the MLM head weights are not in the
        checkpoint.
    """

    def __init__(self, checkpoint, hidden_layer=-1, mlm_checkpoint=None):
        try:
            import torch
            from transformers import (AutoTokenizer, AutoModelForSequenceClassification,
                                      AutoModelForMaskedLM)
        except ImportError:
            raise ModelError("torch and transformers are required for hf: models.") from None
        log = get_logger()
        self._torch = torch
        self.tokenizer = AutoTokenizer.from_pretrained(checkpoint)
        self.classifier = AutoModelForSequenceClassification.from_pretrained(checkpoint)
        self.classifier.eval()
        if mlm_checkpoint is None:
            mlm_checkpoint = checkpoint
        mlm, info = AutoModelForMaskedLM.from_pretrained(mlm_checkpoint, output_loading_info=True)
        missing = missing_head_weights(info)
        if missing:
            raise ModelError(f"{mlm_checkpoint} has no trained MLM head (missing {', '.join(missing)}); "
                             "set mlm_model to a masked-LM checkpoint.")
        mlm.eval()
        self._mlm_head = getattr(mlm, 'cls', None) or getattr(mlm, 'lm_head', None)
        if self._mlm_head is None:
            raise ModelError(f"Cannot find the MLM head of {mlm_checkpoint}.")
        base = getattr(self.classifier, self.classifier.base_model_prefix)
        self._pooler = getattr(base, 'pooler', None)
        self._head = self.classifier.classifier
        self._table = self.classifier.get_input_embeddings().weight.detach()
        self.hidden_layer = hidden_layer
        self.vocab_size, self.d = self._table.shape
        self.num_classes = self.classifier.config.num_labels
        self.mask_token_id = self.tokenizer.mask_token_id
        self.special_token_ids = frozenset(self.tokenizer.all_special_ids)
        self.name = f"hf:{checkpoint}"
        for p in list(self.classifier.parameters()) + list(mlm.parameters()):
            p.requires_grad_(False)
        log.info("Loaded %s (d=%d, vocabulary %d, %d classes), MLM head from %s.",
                 checkpoint, self.d, self.vocab_size, self.num_classes, mlm_checkpoint)

    def tokenize(self, text_a, text_b=None):
        enc = self.tokenizer(text_a, text_b, return_special_tokens_mask=True)
        ids = enc['input_ids']
        tokens = TokenSequence(tuple(ids), tuple(enc['special_tokens_mask']))
        return TokenSequence(tokens.token_ids, tokens.special_mask,
                             self.tokenizer.decode(ids, skip_special_tokens=True))

    def _segment_ids(self, tokens):
        seg, k = [], 0
        for t, s in zip(tokens.token_ids, tokens.special_mask):
            seg.append(k)
            if s and t == self.tokenizer.sep_token_id:
                k = 1
        return seg

    def detokenize(self, tokens):
        segments, current = [], []
        for t, s in zip(tokens.token_ids, tokens.special_mask):
            if s:
                if t == self.tokenizer.sep_token_id and current:
                    segments.append(current)
                    current = []
            else:
                current.append(t)
        if current:
            segments.append(current)
        texts = [self.tokenizer.decode(c, skip_special_tokens=True) for c in segments]
        if not texts:
            return ('', None)
        return (texts[0], ' '.join(texts[1:]) if len(texts) > 1 else None)

    def word_units(self, tokens):
        units = []
        pieces = self.tokenizer.convert_ids_to_tokens(list(tokens.token_ids))
        for i, (p, s) in enumerate(zip(pieces, tokens.special_mask)):
            if s:
                continue
            if p.startswith('##') and units and units[-1][1][-1] == i - 1:
                units[-1] = (units[-1][0] + p[2:], units[-1][1] + [i])
            else:
                units.append((p, [i]))
        return units

    def embed(self, tokens):
        ids = np.array(tokens.token_ids, dtype=np.int64)
        if np.any(ids < 0) or np.any(ids >= self.vocab_size):
            raise ModelError("Token id outside the vocabulary.")
        return EmbeddedInput(self._table[ids].double().numpy(), tokens)

    def _run(self, z, tokens):
        torch = self._torch
        dtype = self._table.dtype
        inputs = z.to(dtype).unsqueeze(0)
        out = self.classifier(inputs_embeds=inputs,
                              token_type_ids=torch.tensor([self._segment_ids(tokens)]),
                              attention_mask=torch.ones(inputs.shape[:2], dtype=torch.long),
                              output_hidden_states=True)
        return out.logits[0], out.hidden_states[self.hidden_layer], out.hidden_states[-1]

    def forward_hidden(self, emb):
        torch = self._torch
        with torch.no_grad():
            _, h, final = self._run(torch.from_numpy(np.array(emb.embeddings)), emb.tokens)
        return TransformerHiddenStates(h[0].double().numpy(), final=final[0].double().numpy())

    def task_logits(self, h):
        torch = self._torch
        final = h.final if isinstance(h, TransformerHiddenStates) else h.states
        with torch.no_grad():
            x = torch.from_numpy(np.array(final)).to(self._table.dtype).unsqueeze(0)
            pooled = self._pooler(x) if self._pooler is not None else x
            return self._head(pooled)[0].double().numpy()

    def mlm_logits(self, h):
        torch = self._torch
        with torch.no_grad():
            x = torch.from_numpy(np.array(h.states)).to(self._table.dtype)
            return self._mlm_head(x).double().numpy()

    def loss_and_grad(self, emb, delta, gold, beta, targets=None):
        torch = self._torch
        f = torch.nn.functional
        d = torch.tensor(np.asarray(delta), dtype=self._table.dtype, requires_grad=True)
        z = torch.from_numpy(np.array(emb.embeddings)).to(self._table.dtype) + d
        logits, h, _ = self._run(z, emb.tokens)
        task_loss = f.cross_entropy(logits.unsqueeze(0), torch.tensor([gold]))
        rows = np.flatnonzero(~emb.tokens.special)
        t = emb.tokens.token_ids if targets is None else targets
        if len(rows) > 0:
            m = self._mlm_head(h[0, rows])
            mlm_loss = f.cross_entropy(m, torch.tensor([t[i] for i in rows]))
        else:
            mlm_loss = torch.zeros(())
        loss = composite_loss(task_loss, mlm_loss, beta)
        if not torch.isfinite(loss):
            raise NonFiniteLoss("Forward pass produced a non-finite loss.")
        loss.backward()
        grad = d.grad.double().numpy()
        if not np.all(np.isfinite(grad)):
            raise NonFiniteLoss("Gradient contains non-finite values.")
        return float(loss.item()), grad
