# Licensed under a 3-clause BSD style license - see LICENSE.rst
# -*- coding: utf-8 -*-
"""
advText.data
============

Dataset ingestion, screening of correctly classified samples, persistence
of attack outcomes and the run pipeline.

Dataset files are JSON-lines, one object per sample::

    {"id": "s1", "text_a": "a fine film", "label": 1}
    {"id": "s2", "text_a": "a premise", "text_b": "a hypothesis", "label": 2}

``id`` is optional.  Files ending in ``.tsv`` hold ``text_a<TAB>label``
or ``text_a<TAB>text_b<TAB>label`` lines instead.
"""
import os
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from typing import Optional

import numpy as np
from desiutil.log import get_logger

from .core import (AttackConfig, LabeledSample, AttackOutcome, AdvTextError, BudgetExhausted,
                   InvalidSample, ParseError, InsufficientCorrect)
from .engine import run_attack
from .metrics import build_report, get_quality_scorer, write_report
from .model import get_local_model
from .reconstruct import get_scorer, read_lexicon
from .util import render, sample_rng, utcnow
from .victim import VictimClient, get_adapter


@dataclass(frozen=True)
class DatasetSpec:
    """Where a dataset lives and what it holds.
    """
    name: str
    num_classes: int
    format: str
    source_path: str

    def __post_init__(self):
        if self.format not in ('single-text', 'text-pair'):
            raise ValueError(f"Unknown dataset format '{self.format}'.")
        if self.num_classes < 2:
            raise ValueError("A dataset needs at least two classes.")

    def to_dict(self):
        return {'name': self.name, 'num_classes': self.num_classes,
                'format': self.format, 'source_path': self.source_path}

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


def _parse_json_line(line, k, spec):
    try:
        row = json.loads(line)
    except json.JSONDecodeError as e:
        raise ParseError(k, f"Invalid JSON: {e.msg}.") from None
    if not isinstance(row, dict):
        raise ParseError(k, "Expected a JSON object.")
    unknown = set(row) - {'id', 'text_a', 'text_b', 'label'}
    if unknown:
        raise ParseError(k, f"Unknown fields {', '.join(sorted(unknown))}.")
    if 'text_a' not in row or 'label' not in row:
        raise ParseError(k, "Fields text_a and label are required.")
    label = row['label']
    if isinstance(label, bool) or not isinstance(label, int):
        raise ParseError(k, f"Label {label!r} is not an integer.")
    return row.get('id'), row['text_a'], row.get('text_b'), label


def _parse_tsv_line(line, k, spec):
    fields = line.rstrip('\n').split('\t')
    n = 3 if spec.format == 'text-pair' else 2
    if len(fields) != n:
        raise ParseError(k, f"Expected {n:d} tab-separated fields, found {len(fields):d}.")
    try:
        label = int(fields[-1])
    except ValueError:
        raise ParseError(k, f"Label '{fields[-1]}' is not an integer.") from None
    return None, fields[0], (fields[1] if n == 3 else None), label


def load_dataset(spec):
    """Read and validate a dataset.

    Parameters
    ----------
    spec : :class:`DatasetSpec`
        Dataset to read.

    Returns
    -------
    :class:`list`
        :class:`~advText.core.LabeledSample` objects in file order.

    Raises
    ------
    :exc:`FileNotFoundError`
        If the source file does not exist.
    :exc:`~advText.core.ParseError`
        On the first malformed line, with its 1-based line number.
    """
    log = get_logger()
    if not os.path.exists(spec.source_path):
        raise FileNotFoundError(f"Dataset file {spec.source_path} does not exist!")
    parse = _parse_tsv_line if spec.source_path.endswith(('.tsv', '.tab')) else _parse_json_line
    samples, ids = [], set()
    with open(spec.source_path) as f:
        for k, line in enumerate(f, start=1):
            if not line.strip():
                continue
            sample_id, text_a, text_b, label = parse(line, k, spec)
            if spec.format == 'text-pair' and text_b is None:
                raise ParseError(k, "Pair-format sample without text_b.")
            if spec.format == 'single-text' and text_b is not None:
                raise ParseError(k, "Single-text sample with text_b.")
            if sample_id is None:
                sample_id = f"{spec.name}-{k:06d}"
            if sample_id in ids:
                raise ParseError(k, f"Duplicate sample id '{sample_id}'.")
            ids.add(sample_id)
            try:
                samples.append(LabeledSample(id=str(sample_id), text_a=text_a, gold_label=label,
                                             num_classes=spec.num_classes, text_b=text_b))
            except (InvalidSample, TypeError, AttributeError) as e:
                raise ParseError(k, str(e)) from None
    missing = sorted(set(range(spec.num_classes)) - set(s.gold_label for s in samples))
    if samples and missing:
        log.warning("Dataset %s declares %d classes but has no samples labeled %s.",
                    spec.name, spec.num_classes, ', '.join(map(str, missing)))
    log.info("Loaded %d samples from %s.", len(samples), spec.source_path)
    return samples


def sample_correct(samples, victim, n, rng):
    """Uniformly sample `n` samples that the victim classifies correctly.

    Samples are screened in a random order until `n` correct ones are
    found; samples the victim cannot classify are skipped with a warning.
    `victim` should be a client dedicated to screening, so these
    queries never count against attack budgets.

    Parameters
    ----------
    samples : :class:`list`
        Candidate samples.
    victim : :class:`~advText.victim.VictimClient`
        Screening client.
    n : :class:`int` or ``None``
        Number of samples wanted; ``None`` keeps every correct sample.
    rng : :class:`numpy.random.Generator`
        Random source.

    Returns
    -------
    :class:`list`
        The selected samples, in their original order.

    Raises
    ------
    :exc:`~advText.core.InsufficientCorrect`
        If fewer than `n` correctly classified samples exist.
    """
    log = get_logger()
    selected = []
    for i in rng.permutation(len(samples)):
        s = samples[i]
        try:
            decision = victim.classify(s.text_a, s.text_b)
        except BudgetExhausted:
            raise
        except AdvTextError as e:
            log.warning("Screening of %s failed, skipping it: %s", s.id, e)
            continue
        if decision.predicted_label == s.gold_label:
            selected.append(int(i))
            if n is not None and len(selected) == n:
                break
    if n is not None and len(selected) < n:
        raise InsufficientCorrect(len(selected), n)
    log.info("Selected %d correctly classified samples after %d screening queries.",
             len(selected), victim.queries_made)
    return [samples[i] for i in sorted(selected)]


@dataclass
class RunManifest:
    """Everything needed to repeat a run.

    Attributes
    ----------
    config : :class:`~advText.core.AttackConfig`
        Attack parameters.
    dataset : :class:`DatasetSpec`
        Dataset.
    victim_name : :class:`str`
        Victim description, ``inproc:NAME`` or ``http:URL``.
    local_model_name : :class:`str`
        Local model name, see :func:`~advText.model.get_local_model`.
    seed : :class:`int`
        Seed of the screening draw.
    n_samples : :class:`int`, optional
        Number of samples to attack; all correctly classified ones if ``None``.
    settings : :class:`dict`, optional
        Remaining run settings (scorers, lexicon, timeout).
    started_at : :class:`~datetime.datetime`, optional
        Start time.
    finished_at : :class:`~datetime.datetime`, optional
        End time.
    """
    config: AttackConfig
    dataset: DatasetSpec
    victim_name: str
    local_model_name: str
    seed: int
    n_samples: Optional[int] = None
    settings: dict = field(default_factory=dict)
    started_at: Optional[datetime] = None
    finished_at: Optional[datetime] = None

    def to_dict(self):
        return {'config': self.config.to_dict(),
                'dataset': self.dataset.to_dict(),
                'victim_name': self.victim_name,
                'local_model_name': self.local_model_name,
                'seed': self.seed,
                'n_samples': self.n_samples,
                'settings': dict(self.settings),
                'started_at': None if self.started_at is None else self.started_at.isoformat(),
                'finished_at': None if self.finished_at is None else self.finished_at.isoformat()}

    @classmethod
    def from_dict(cls, data):
        def when(s):
            return None if s is None else datetime.fromisoformat(s)
        return cls(config=AttackConfig.from_dict(data['config']),
                   dataset=DatasetSpec.from_dict(data['dataset']),
                   victim_name=data['victim_name'], local_model_name=data['local_model_name'],
                   seed=data['seed'], n_samples=data.get('n_samples'),
                   settings=data.get('settings', {}),
                   started_at=when(data.get('started_at')), finished_at=when(data.get('finished_at')))

    def write(self, filename):
        with open(filename, 'w') as j:
            json.dump(self.to_dict(), j, indent=1)


def read_outcomes(filename):
    """Read an outcome file.

    A truncated final line, left by an interrupted run, is skipped with a
    warning.

    Parameters
    ----------
    filename : :class:`str`
        JSON-lines outcome file.

    Returns
    -------
    :class:`list`
        :class:`~advText.core.AttackOutcome` objects in file order.

    Raises
    ------
    :exc:`~advText.core.ParseError`
        If a line other than the last is malformed.
    """
    log = get_logger()
    with open(filename) as f:
        lines = f.readlines()
    outcomes = []
    for k, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            outcomes.append(AttackOutcome.from_dict(json.loads(line)))
        except (ValueError, KeyError, TypeError) as e:
            if k == len(lines) and not line.endswith('\n'):
                log.warning("Skipping truncated last line of %s.", filename)
                continue
            raise ParseError(k, f"{filename}: {e}") from None
    return outcomes


class OutcomeWriter:
    """Append outcomes to a JSON-lines file, one durable line at a time.

    A partial last line left by an interrupted run is removed on open.

    Parameters
    ----------
    filename : :class:`str`
        Outcome file.
    """

    def __init__(self, filename):
        self.filename = filename
        if os.path.exists(filename):
            with open(filename, 'rb+') as f:
                data = f.read()
                if data and not data.endswith(b'\n'):
                    f.truncate(data.rfind(b'\n') + 1)
        self._file = open(filename, 'a')

    def write(self, outcome):
        self._file.write(outcome.to_json() + '\n')
        self._file.flush()
        os.fsync(self._file.fileno())

    def close(self):
        self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *args):
        self.close()


def run(manifest, out_dir, parallel=1, verbose=False):
    """Screen, attack and evaluate a dataset.

    Outcomes are appended to ``outcomes.jsonl`` in dataset order as soon as
    they are known; samples already present in that file are not attacked
    again.  ``manifest.json``, ``report.json`` and ``report.txt`` are written
    at the end, plus ``steps.jsonl`` if `verbose` is set.

    Parameters
    ----------
    manifest : :class:`RunManifest`
        Run description; ``started_at`` and ``finished_at`` are filled in.
    out_dir : :class:`str`
        Output directory, created if needed.
    parallel : :class:`int`, optional
        Number of concurrent attack sessions.
    verbose : :class:`bool`, optional
        Write per-step reports.

    Returns
    -------
    :class:`~advText.metrics.MetricsReport`
        The report.
    """
    log = get_logger()
    settings = manifest.settings
    manifest.started_at = utcnow()
    os.makedirs(out_dir, exist_ok=True)
    cfg = manifest.config
    local = get_local_model(manifest.local_model_name, settings.get('hidden_layer', -1),
                            settings.get('mlm_model') or None)
    samples = load_dataset(manifest.dataset)
    adapter = get_adapter(manifest.victim_name, timeout=settings.get('victim_timeout', 10.0), model=local,
                          mlm_model=settings.get('mlm_model') or None)
    screen = VictimClient(adapter, len(samples), manifest.dataset.num_classes)
    selected = sample_correct(samples, screen, manifest.n_samples, np.random.default_rng(manifest.seed))
    scorer = get_scorer(settings.get('similarity', 'mean-embed-cosine'), local)
    lexicon = read_lexicon(settings['lexicon']) if settings.get('lexicon') else None
    outcome_file = os.path.join(out_dir, 'outcomes.jsonl')
    done = dict()
    if os.path.exists(outcome_file):
        done = dict((o.sample_id, o) for o in read_outcomes(outcome_file))
        log.info("Resuming: %d outcomes already in %s.", len(done), outcome_file)
    todo = [s for s in selected if s.id not in done]

    def attack(sample):
        victim = VictimClient(adapter, cfg.max_queries, manifest.dataset.num_classes)
        steps = []
        try:
            outcome = run_attack(sample, local, victim, cfg, scorer=scorer, lexicon=lexicon,
                                 rng=sample_rng(cfg.random_seed, sample.id),
                                 report=steps.append if verbose else None)
        except AdvTextError as e:
            log.warning("Attack on %s aborted: %s", sample.id, e)
            outcome = AttackOutcome(sample_id=sample.id, success=False,
                                    queries_used=victim.queries_made, iterations_used=0)
        return outcome, steps

    log.info("Attacking %d samples with %d parallel sessions.", len(todo), parallel)
    with OutcomeWriter(outcome_file) as writer, ThreadPoolExecutor(max_workers=max(1, parallel)) as pool:
        step_file = open(os.path.join(out_dir, 'steps.jsonl'), 'a') if verbose else None
        try:
            futures = [pool.submit(attack, s) for s in todo]
            # Results are consumed in submission order, so the file follows the dataset.
            for s, future in zip(todo, futures):
                outcome, steps = future.result()
                writer.write(outcome)
                done[s.id] = outcome
                if step_file is not None:
                    for r in steps:
                        step_file.write(r.to_json(sample_id=s.id) + '\n')
                    step_file.flush()
                log.debug("%s: success=%s, queries=%d.", s.id, outcome.success, outcome.queries_used)
        finally:
            if step_file is not None:
                step_file.close()
    outcomes = [done[s.id] for s in selected]
    originals = dict((s.id, render(s.text_a, s.text_b)) for s in samples)
    quality = get_quality_scorer(settings.get('grammar', 'none'), settings.get('perplexity', 'unigram'),
                                 corpus=originals.values())
    report = build_report(outcomes, originals, quality,
                          dataset=manifest.dataset.name, victim=manifest.victim_name)
    manifest.finished_at = utcnow()
    manifest.write(os.path.join(out_dir, 'manifest.json'))
    write_report([report], out_dir)
    log.info("ASR %.2f%% over %d samples.", report.asr_percent, report.n_samples)
    return report
