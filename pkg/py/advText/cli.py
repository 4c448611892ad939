# Licensed under a 3-clause BSD style license - see LICENSE.rst
# -*- coding: utf-8 -*-
"""
advText.cli
===========

Entry point for the ``adv_text`` command-line script.

Subcommands:

``attack``
    Screen a dataset and attack every selected sample.
``report``
    Re-aggregate the outcome file of a previous run.
``screen``
    Select correctly classified samples without attacking them.
``selftest``
    Run the invariant checks on the tiny reference model.
"""
import os
import json
from dataclasses import replace

import numpy as np
from desiutil.log import get_logger, DEBUG, INFO

from .core import AdvTextError, read_config
from .data import (DatasetSpec, RunManifest, load_dataset, sample_correct,
                   read_outcomes, run)
from .metrics import build_report, get_quality_scorer, write_report
from .selftest import run_checks
from .tiny import write_dataset
from .util import common_options, render
from .victim import VictimClient, get_adapter


def get_options():
    """Parse command-line options.

    Returns
    -------
    :class:`argparse.Namespace`
        The parsed options.
    """
    prsr = common_options("Craft adversarial texts against a decision-only victim.")
    sub = prsr.add_subparsers(dest='command', metavar='COMMAND')
    sub.required = True

    def victim_options(p):
        p.add_argument('-d', '--dataset', action='store', dest='dataset', metavar='FILE', required=True,
                       help='Read samples from FILE (JSON-lines, or tab-separated if FILE ends in .tsv).')
        p.add_argument('--victim', action='store', dest='victim', metavar='VICTIM', default='inproc:tiny',
                       help='Victim, inproc:NAME or http:URL (default "%(default)s").')
        p.add_argument('-s', '--seed', action='store', dest='seed', metavar='N', type=int,
                       help='Override the random seed of the configuration file.')
        p.add_argument('-n', '--n-samples', action='store', dest='n_samples', metavar='N', type=int,
                       help='Select N correctly classified samples (default all).')

    p = sub.add_parser('attack', help='Screen and attack a dataset.')
    victim_options(p)
    p.add_argument('-o', '--out', action='store', dest='out', metavar='DIR', required=True,
                   help='Write outcomes, manifest and report to DIR.')
    p.add_argument('-p', '--parallel', action='store', dest='parallel', metavar='K', type=int, default=1,
                   help='Run K attack sessions in parallel (default %(default)s).')
    p = sub.add_parser('report', help='Re-aggregate the outcomes of a run.')
    p.add_argument('-o', '--out', action='store', dest='out', metavar='DIR', required=True,
                   help='Directory of a previous run.')
    p = sub.add_parser('screen', help='Select correctly classified samples.')
    victim_options(p)
    p.add_argument('-o', '--out', action='store', dest='out', metavar='DIR',
                   help='Write the selection to DIR/screened.jsonl.')
    p = sub.add_parser('selftest', help='Check invariants of the tiny reference model.')
    p.add_argument('-s', '--seed', action='store', dest='seed', metavar='N', type=int, default=0,
                   help='Seed of the random inputs (default %(default)s).')
    p.add_argument('--scale', action='store', dest='scale', metavar='X', type=float, default=1.0,
                   help='Multiply the size of every check by X (default %(default)s).')
    options = prsr.parse_args()
    return options


def _dataset(options, settings):
    return DatasetSpec(name=settings['dataset_name'], num_classes=settings['num_classes'],
                       format=settings['format'], source_path=options.dataset)


def attack(options, cfg, settings):
    """Run the ``attack`` subcommand."""
    log = get_logger()
    if options.seed is not None:
        cfg = replace(cfg, random_seed=options.seed)
    manifest = RunManifest(config=cfg, dataset=_dataset(options, settings),
                           victim_name=options.victim, local_model_name=settings['local_model'],
                           seed=cfg.random_seed, n_samples=options.n_samples, settings=settings)
    report = run(manifest, options.out, parallel=options.parallel, verbose=options.verbose)
    log.info("Attack success rate: %.2f%%.", report.asr_percent)
    return 0


def report(options, cfg, settings):
    """Run the ``report`` subcommand."""
    log = get_logger()
    manifest_file = os.path.join(options.out, 'manifest.json')
    outcome_file = os.path.join(options.out, 'outcomes.jsonl')
    with open(manifest_file) as j:
        manifest = RunManifest.from_dict(json.load(j))
    outcomes = read_outcomes(outcome_file)
    samples = load_dataset(manifest.dataset)
    originals = dict((s.id, render(s.text_a, s.text_b)) for s in samples)
    quality = get_quality_scorer(manifest.settings.get('grammar', 'none'),
                                 manifest.settings.get('perplexity', 'unigram'),
                                 corpus=originals.values())
    r = build_report(outcomes, originals, quality,
                     dataset=manifest.dataset.name, victim=manifest.victim_name)
    write_report([r], options.out)
    log.info("Attack success rate: %.2f%% over %d samples.", r.asr_percent, r.n_samples)
    return 0


def screen(options, cfg, settings):
    """Run the ``screen`` subcommand."""
    log = get_logger()
    seed = cfg.random_seed if options.seed is None else options.seed
    samples = load_dataset(_dataset(options, settings))
    adapter = get_adapter(options.victim, timeout=settings['victim_timeout'],
                          mlm_model=settings['mlm_model'] or None)
    victim = VictimClient(adapter, len(samples), settings['num_classes'])
    selected = sample_correct(samples, victim, options.n_samples, np.random.default_rng(seed))
    if options.out:
        os.makedirs(options.out, exist_ok=True)
        filename = os.path.join(options.out, 'screened.jsonl')
        write_dataset(selected, filename)
        log.info("Wrote %d samples to %s.", len(selected), filename)
    else:
        for s in selected:
            print(s.id)
    return 0


def selftest(options, cfg, settings):
    """Run the ``selftest`` subcommand."""
    results = run_checks(scale=options.scale, seed=options.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail} ({r.seconds:.1f} s)")
    return 0 if all(r.passed for r in results) else 1


def main():
    """Entry point for command-line script.

    Returns
    -------
    :class:`int`
        An integer suitable for passing to :func:`sys.exit`.
    """
    #
    # command-line arguments
    #
    options = get_options()
    #
    # Logging
    #
    if options.verbose:
        log = get_logger(DEBUG, timestamp=True)
    else:
        log = get_logger(INFO, timestamp=True)
    #
    # Read configuration file.
    #
    try:
        cfg, settings = read_config(options.config)
    except FileNotFoundError:
        log.critical("Failed to read configuration file: %s!", options.config)
        return 1
    except AdvTextError as e:
        log.critical("Invalid configuration file %s: %s", options.config, e)
        return 1
    commands = {'attack': attack, 'report': report, 'screen': screen, 'selftest': selftest}
    try:
        return commands[options.command](options, cfg, settings)
    except FileNotFoundError as e:
        log.critical("%s", e)
        return 1
    except AdvTextError as e:
        log.critical("%s: %s", type(e).__name__, e)
        return 1
