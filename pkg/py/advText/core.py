# Licensed under a 3-clause BSD style license - see LICENSE.rst
# -*- coding: utf-8 -*-
"""
advText.core
============

Domain types, configuration and exceptions shared by every other module.

All types are immutable value objects except :class:`PerturbationState`,
which belongs to exactly one attack session.
"""
import json
import math
import importlib.resources as ir
from configparser import ConfigParser
from dataclasses import dataclass, field, fields, asdict
from typing import Optional, Tuple

import numpy as np


class AdvTextError(Exception):
    """Base class for all errors raised by this package.
    """
    pass


class InvalidConfig(AdvTextError, ValueError):
    """A configuration value violates an invariant.

    Parameters
    ----------
    field : :class:`str`
        Name of the offending field.
    message : :class:`str`, optional
        Additional explanation.
    """
    def __init__(self, field, message=None):
        self.field = field
        if message is None:
            message = f"Invalid value for '{field}'."
        super().__init__(message)


class InvalidSample(AdvTextError, ValueError):
    """A :class:`LabeledSample` violates an invariant.
    """
    pass


class TokenizationError(AdvTextError):
    """Text contains units outside the model vocabulary.
    """
    pass


class ModelError(AdvTextError):
    """A local model could not be loaded or used.
    """
    pass


class NonFiniteLoss(AdvTextError, ArithmeticError):
    """The forward pass produced a non-finite value.
    """
    pass


class DegenerateGradient(AdvTextError, ArithmeticError):
    """The gradient norm is too small to define a step direction.
    """
    pass


class NoMaskablePosition(AdvTextError):
    """Every position of a token sequence is special.
    """
    pass


class BudgetExhausted(AdvTextError):
    """A victim client has no queries left.
    """
    pass


class RemoteUnavailable(AdvTextError):
    """A remote victim did not answer after all retries.
    """
    pass


class BadDecision(AdvTextError, ValueError):
    """A victim answered with something other than a label in range.
    """
    pass


class EmptyInput(AdvTextError, ValueError):
    """An aggregate was requested over an empty list.
    """
    pass


class ScorerUnavailable(AdvTextError):
    """A quality or similarity backend is not configured or not installed.
    """
    pass


class ParseError(AdvTextError, ValueError):
    """A dataset record could not be parsed.

    Parameters
    ----------
    line : :class:`int`
        One-based line number of the bad record.
    message : :class:`str`
        Explanation.
    """
    def __init__(self, line, message):
        self.line = line
        super().__init__(f"Line {line:d}: {message}")


class InsufficientCorrect(AdvTextError):
    """Too few samples are classified correctly by the victim.

    Parameters
    ----------
    available : :class:`int`
        Number of correctly classified samples found.
    requested : :class:`int`, optional
        Number of samples requested.
    """
    def __init__(self, available, requested=None):
        self.available = available
        self.requested = requested
        if requested is None:
            super().__init__(f"Only {available:d} correctly classified samples available.")
        else:
            super().__init__(f"Only {available:d} correctly classified samples available, {requested:d} requested.")


@dataclass(frozen=True)
class LabeledSample:
    """A text (or text pair) with its gold label.
    """
    id: str
    text_a: str
    gold_label: int
    num_classes: int
    text_b: Optional[str] = None

    def __post_init__(self):
        if not self.text_a or not self.text_a.strip():
            raise InvalidSample(f"Sample {self.id}: text_a is empty.")
        if self.text_b is not None and not self.text_b.strip():
            raise InvalidSample(f"Sample {self.id}: text_b is empty.")
        if not (0 <= self.gold_label < self.num_classes):
            raise InvalidSample(f"Sample {self.id}: label {self.gold_label} outside [0, {self.num_classes}).")

    @property
    def is_pair(self):
        return self.text_b is not None

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass(frozen=True)
class TokenSequence:
    """Token ids of a tokenized text.

    Positions flagged in `special_mask` (delimiters, separators) are never
    perturbed, masked, or decoded to a different token.
    """
    token_ids: Tuple[int, ...]
    special_mask: Tuple[bool, ...]
    surface: str = ''

    def __post_init__(self):
        object.__setattr__(self, 'token_ids', tuple(int(t) for t in self.token_ids))
        object.__setattr__(self, 'special_mask', tuple(bool(s) for s in self.special_mask))
        if len(self.token_ids) == 0:
            raise ValueError("A token sequence needs at least one token.")
        if len(self.token_ids) != len(self.special_mask):
            raise ValueError("token_ids and special_mask differ in length.")

    def __len__(self):
        return len(self.token_ids)

    @property
    def key(self):
        """Hashable identity used by the novelty gate.
        """
        return self.token_ids

    @property
    def special(self):
        """:class:`numpy.ndarray` of booleans, one per position.
        """
        return np.array(self.special_mask, dtype=bool)

    @property
    def maskable(self):
        """Indexes of non-special positions.
        """
        return [i for i, s in enumerate(self.special_mask) if not s]

    def replace(self, position, token_id, surface=''):
        """Copy with one position replaced.
        """
        ids = list(self.token_ids)
        ids[position] = token_id
        return TokenSequence(tuple(ids), self.special_mask, surface)

    def to_dict(self):
        return {'token_ids': list(self.token_ids),
                'special_mask': list(self.special_mask),
                'surface': self.surface}

    @classmethod
    def from_dict(cls, data):
        return cls(tuple(data['token_ids']), tuple(data['special_mask']), data['surface'])


@dataclass(frozen=True, eq=False)
class EmbeddedInput:
    """Token embeddings, one row per token of `tokens`.
    """
    embeddings: np.ndarray
    tokens: TokenSequence

    def __post_init__(self):
        e = np.array(self.embeddings, dtype=np.float64)
        e.setflags(write=False)
        object.__setattr__(self, 'embeddings', e)
        if e.ndim != 2 or e.shape[0] != len(self.tokens):
            raise ValueError(f"Embedding shape {e.shape} does not match {len(self.tokens)} tokens.")
        if not np.all(np.isfinite(e)):
            raise ValueError("Embeddings contain non-finite values.")

    @property
    def seq_len(self):
        return self.embeddings.shape[0]

    @property
    def d(self):
        return self.embeddings.shape[1]

    def __eq__(self, other):
        if not isinstance(other, EmbeddedInput):
            return NotImplemented
        return self.tokens == other.tokens and np.array_equal(self.embeddings, other.embeddings)

    def to_dict(self):
        return {'embeddings': self.embeddings.tolist(), 'tokens': self.tokens.to_dict()}

    @classmethod
    def from_dict(cls, data):
        return cls(np.array(data['embeddings'], dtype=np.float64),
                   TokenSequence.from_dict(data['tokens']))


#
# Defaults for values the method leaves open. These are engineering
# choices; all of them can be overridden in the configuration file.
#
DEFAULT_ALPHA = 1.0
DEFAULT_EPSILON = 5.0
DEFAULT_BETA = -1.0
DEFAULT_USE_THRESHOLD = 0.7
DEFAULT_MAX_ITERATIONS = 50
DEFAULT_MAX_QUERIES = 30


@dataclass(frozen=True)
class AttackConfig:
    """Free parameters of an attack session.

    Attributes
    ----------
    alpha : :class:`float`
        Step size of each normalized gradient step.
    epsilon : :class:`float`
        Radius of the L2 ball around the clean embeddings.
    beta : :class:`float`
        Weight of the masked-language-model loss; must be negative.
    use_threshold : :class:`float`
        Minimum similarity (exclusive) of an accepted adversary.
    max_iterations : :class:`int`
        Iteration cap per sample.
    max_queries : :class:`int`
        Victim query budget per sample.
    mask_one_token : :class:`bool`
        Mask one random non-special token before embedding.
    random_seed : :class:`int`
        Seed for masking and re-initialization draws.
    """
    alpha: float = DEFAULT_ALPHA
    epsilon: float = DEFAULT_EPSILON
    beta: float = DEFAULT_BETA
    use_threshold: float = DEFAULT_USE_THRESHOLD
    max_iterations: int = DEFAULT_MAX_ITERATIONS
    max_queries: int = DEFAULT_MAX_QUERIES
    mask_one_token: bool = True
    random_seed: int = 0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        """Build from a mapping, rejecting unknown keys.
        """
        known = {f.name for f in fields(cls)}
        for k in data:
            if k not in known:
                raise InvalidConfig(k, f"Unknown configuration key '{k}'.")
        return cls(**data)


def validate_config(cfg):
    """Check every invariant of an :class:`AttackConfig`.

    Parameters
    ----------
    cfg : :class:`AttackConfig`
        Configuration to check.

    Returns
    -------
    :class:`AttackConfig`
        `cfg`, unchanged.

    Raises
    ------
    :exc:`InvalidConfig`
        Naming the first violated field.
    """
    def finite(x):
        return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)

    if not (finite(cfg.alpha) and cfg.alpha > 0):
        raise InvalidConfig('alpha', "alpha must be a positive number.")
    if not (finite(cfg.epsilon) and cfg.epsilon > 0):
        raise InvalidConfig('epsilon', "epsilon must be a positive number.")
    if not (finite(cfg.beta) and cfg.beta < 0):
        raise InvalidConfig('beta', "beta must be negative.")
    if not (finite(cfg.use_threshold) and 0 <= cfg.use_threshold <= 1):
        raise InvalidConfig('use_threshold', "use_threshold must lie in [0, 1].")
    for name in ('max_iterations', 'max_queries'):
        value = getattr(cfg, name)
        if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
            raise InvalidConfig(name, f"{name} must be a positive integer.")
    if not isinstance(cfg.mask_one_token, (bool, np.bool_)):
        raise InvalidConfig('mask_one_token', "mask_one_token must be a boolean.")
    if isinstance(cfg.random_seed, bool) or not isinstance(cfg.random_seed, (int, np.integer)):
        raise InvalidConfig('random_seed', "random_seed must be an integer.")
    return cfg


@dataclass
class PerturbationState:
    """Mutable search state of one attack session.
    """
    delta: np.ndarray
    base_embeddings: EmbeddedInput
    step: int = 0
    previous_decodings: set = field(default_factory=set)
    best_similarity_so_far: Optional[float] = None

    @classmethod
    def start(cls, base_embeddings, adv0):
        """Zero perturbation whose history holds the clean decoding `adv0`.
        """
        return cls(delta=np.zeros_like(base_embeddings.embeddings),
                   base_embeddings=base_embeddings,
                   previous_decodings={adv0.key})

    @property
    def special(self):
        return self.base_embeddings.tokens.special

    @property
    def perturbed(self):
        """Embeddings plus perturbation, E + δ.
        """
        return EmbeddedInput(self.base_embeddings.embeddings + self.delta,
                             self.base_embeddings.tokens)

    def to_dict(self):
        return {'delta': self.delta.tolist(),
                'base_embeddings': self.base_embeddings.to_dict(),
                'step': self.step,
                'previous_decodings': sorted(list(k) for k in self.previous_decodings),
                'best_similarity_so_far': self.best_similarity_so_far}

    @classmethod
    def from_dict(cls, data):
        return cls(delta=np.array(data['delta'], dtype=np.float64),
                   base_embeddings=EmbeddedInput.from_dict(data['base_embeddings']),
                   step=data['step'],
                   previous_decodings={tuple(k) for k in data['previous_decodings']},
                   best_similarity_so_far=data['best_similarity_so_far'])


@dataclass(frozen=True)
class CandidateAdversary:
    """A decoded token sequence considered for a victim query.
    """
    tokens: TokenSequence
    similarity_to_original: float
    is_novel: bool
    iteration_found: int

    def to_dict(self):
        return {'tokens': self.tokens.to_dict(),
                'similarity_to_original': self.similarity_to_original,
                'is_novel': self.is_novel,
                'iteration_found': self.iteration_found}

    @classmethod
    def from_dict(cls, data):
        return cls(TokenSequence.from_dict(data['tokens']), data['similarity_to_original'],
                   data['is_novel'], data['iteration_found'])


@dataclass(frozen=True)
class Decision:
    """The only thing a victim ever reveals: its predicted label.
    """
    predicted_label: int

    def __post_init__(self):
        if isinstance(self.predicted_label, bool) or not isinstance(self.predicted_label, (int, np.integer)):
            raise TypeError("predicted_label must be an integer.")
        object.__setattr__(self, 'predicted_label', int(self.predicted_label))

    def check(self, num_classes):
        """Return self if the label is in range.
        """
        if not (0 <= self.predicted_label < num_classes):
            raise ValueError(f"Label {self.predicted_label} outside [0, {num_classes}).")
        return self

    def to_dict(self):
        return {'predicted_label': self.predicted_label}

    @classmethod
    def from_dict(cls, data):
        return cls(data['predicted_label'])


@dataclass(frozen=True)
class AttackOutcome:
    """Result of attacking one sample.
    """
    sample_id: str
    success: bool
    queries_used: int
    iterations_used: int
    adversarial_text: Optional[str] = None
    final_similarity: Optional[float] = None

    def to_dict(self):
        return {'sample_id': self.sample_id,
                'success': self.success,
                'adversarial_text': self.adversarial_text,
                'queries_used': self.queries_used,
                'iterations_used': self.iterations_used,
                'final_similarity': self.final_similarity}

    def to_json(self):
        """One line of the outcome file.
        """
        return json.dumps(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, data):
        return cls(sample_id=data['sample_id'], success=data['success'],
                   queries_used=data['queries_used'], iterations_used=data['iterations_used'],
                   adversarial_text=data.get('adversarial_text'),
                   final_similarity=data.get('final_similarity'))


#
# Run-level settings: everything a run needs besides AttackConfig.
#
_run_defaults = {'local_model': 'tiny',
                 'hidden_layer': '-1',
                 'mlm_model': '',
                 'similarity': 'mean-embed-cosine',
                 'lexicon': '',
                 'grammar': 'none',
                 'perplexity': 'unigram',
                 'victim_timeout': '10.0',
                 'dataset_name': 'synthetic',
                 'num_classes': '2',
                 'format': 'single-text'}


def default_config_file():
    """Path to the configuration file shipped with the package.

    Returns
    -------
    :class:`str`
        Path to ``adv_text.ini``.
    """
    return str(ir.files('advText') / 'data' / 'adv_text.ini')


def _coerce(name, value, kind):
    """Convert one string value read from an ``.ini`` file.
    """
    if not isinstance(value, str):
        return value
    try:
        if kind is bool:
            v = value.strip().lower()
            if v in ('1', 'yes', 'true', 'on'):
                return True
            if v in ('0', 'no', 'false', 'off'):
                return False
            raise ValueError(value)
        return kind(value)
    except ValueError:
        raise InvalidConfig(name, f"Cannot convert '{value}' for '{name}'.") from None


def parse_config(sections):
    """Convert configuration sections to an :class:`AttackConfig` and run settings.

    Parameters
    ----------
    sections : :class:`dict`
        Mapping of section name to a mapping of key to value.

    Returns
    -------
    :class:`tuple`
        The validated :class:`AttackConfig` and a :class:`dict` of run settings.

    Raises
    ------
    :exc:`InvalidConfig`
        On unknown sections or keys, or invalid values.
    """
    for s in sections:
        if s not in ('attack', 'run'):
            raise InvalidConfig(s, f"Unknown configuration section '{s}'.")
    kinds = {'alpha': float, 'epsilon': float, 'beta': float, 'use_threshold': float,
             'max_iterations': int, 'max_queries': int, 'mask_one_token': bool,
             'random_seed': int}
    attack = dict(sections.get('attack', {}))
    for k in attack:
        if k not in kinds:
            raise InvalidConfig(k, f"Unknown configuration key '{k}'.")
        attack[k] = _coerce(k, attack[k], kinds[k])
    cfg = validate_config(AttackConfig.from_dict(attack))
    run = dict(_run_defaults)
    for k, v in sections.get('run', {}).items():
        if k not in _run_defaults:
            raise InvalidConfig(k, f"Unknown configuration key '{k}'.")
        run[k] = v if isinstance(v, str) else str(v)
    run['hidden_layer'] = _coerce('hidden_layer', run['hidden_layer'], int)
    run['victim_timeout'] = _coerce('victim_timeout', run['victim_timeout'], float)
    run['num_classes'] = _coerce('num_classes', run['num_classes'], int)
    if run['format'] not in ('single-text', 'text-pair'):
        raise InvalidConfig('format', f"Unknown dataset format '{run['format']}'.")
    if run['similarity'] not in ('mean-embed-cosine', 'external-sentence-encoder'):
        raise InvalidConfig('similarity', f"Unknown similarity scorer '{run['similarity']}'.")
    return cfg, run


def read_config(filename):
    """Read a configuration file.

    ``.json`` files hold an object with ``attack`` and ``run`` members;
    anything else is read as an ``.ini`` file.

    Parameters
    ----------
    filename : :class:`str`
        Path to the configuration file.

    Returns
    -------
    :class:`tuple`
        The validated :class:`AttackConfig` and a :class:`dict` of run settings.

    Raises
    ------
    :exc:`FileNotFoundError`
        If `filename` cannot be read.
    :exc:`InvalidConfig`
        If the contents are invalid.
    """
    if filename.endswith('.json'):
        with open(filename) as j:
            sections = json.load(j)
        if not isinstance(sections, dict):
            raise InvalidConfig(filename, "Configuration must be a JSON object.")
        return parse_config(sections)
    config = ConfigParser()
    r = config.read(filename)
    if not (r and r[0] == filename):
        raise FileNotFoundError(f"Failed to read configuration file: {filename}!")
    return parse_config({s: dict(config[s]) for s in config.sections()})
