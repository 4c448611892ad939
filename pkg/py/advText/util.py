# Licensed under a 3-clause BSD style license - see LICENSE.rst
# -*- coding: utf-8 -*-
"""
advText.util
============

Classes and functions for use by all attack code.
"""
import sys
from argparse import ArgumentParser
from datetime import datetime
from os.path import basename
import zlib

import numpy as np
from pytz import utc

from . import __version__ as advText_version
from .core import default_config_file


def utcnow():
    """Current time as a timezone-aware UTC :class:`~datetime.datetime`.
    """
    return datetime.now(tz=utc)


def sample_rng(seed, sample_id):
    """Random source for one attack session.

    The stream depends only on the run seed and the sample id, so a sample
    draws the same numbers regardless of the order in which samples are
    attacked.

    Parameters
    ----------
    seed : :class:`int`
        Run seed.
    sample_id : :class:`str`
        Identifier of the sample.

    Returns
    -------
    :class:`numpy.random.Generator`
        A seeded generator.
    """
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(sample_id.encode('utf-8'))])


def render(text_a, text_b=None):
    """Single string for a text or a text pair, used by sentence-level scorers.
    """
    return text_a if text_b is None else f"{text_a} {text_b}"


def common_options(description):
    """Define a set of common command-line options.

    Individual subcommands will add additional options.

    Parameters
    ----------
    description : :class:`str`
        Define the description in the command-line help.

    Returns
    -------
    :class:`~argparse.ArgumentParser`
        An argument parser to which further arguments may be added.
    """
    prsr = ArgumentParser(description=description,
                          prog=basename(sys.argv[0]))
    prsr.add_argument('-c', '--config', action='store', dest='config', metavar='FILE',
                      default=default_config_file(),
                      help="Override the default configuration file.")
    prsr.add_argument('-v', '--verbose', action='store_true', dest='verbose',
                      help='Print extra information and write per-step reports.')
    prsr.add_argument('-V', '--version', action='version',
                      version='%(prog)s ' + advText_version)
    return prsr
