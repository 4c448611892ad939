# Licensed under a 3-clause BSD style license - see LICENSE.rst
# -*- coding: utf-8 -*-
"""
advText
=======

Tools for crafting textual adversarial examples against decision-only
classifiers.

Small perturbations are accumulated on the token embeddings of a local
encoder with normalized projected gradient steps. The perturbed hidden
states are decoded through a masked-language-model head, and the victim
is queried only when the decoded text is new and more similar to the
original than anything queried before.

It does *not* include:

#. Fine-tuning of the local model or of victim models.
#. Score-based or gradient access to victim models.
#. Human evaluation of adversarial samples.
"""
from ._version import __version__
