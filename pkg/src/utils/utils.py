"""Shared helpers: the project PRNG, configuration hashing, stage timing and
mean/std summaries across seeds.

All stochastic steps in the project draw from numpy's PCG64 bit generator
seeded with ``numpy.random.default_rng([seed, *stream])``. The stream words
separate independent uses of one seed (initialisation, shuffling per epoch,
random pruning) so they never share a sequence.
"""

import hashlib
import json
import time
from contextlib import contextmanager

import numpy as np
import pandas as pd


def make_rng(seed, *stream):
    """
    Returns the project PRNG for a seed and an optional stream id

    Parameters
    ----------
    seed : int
        non-negative 64-bit seed
    *stream : int
        extra words that select an independent stream, e.g. the epoch number

    Returns
    -------
    numpy.random.Generator
        a PCG64-backed generator

    Example
    -------
    rng = make_rng(7, 3)  # epoch 3 shuffling stream of seed 7
    """
    if int(seed) < 0:
        raise ValueError(f"Expected a non-negative seed, got {seed}")
    return np.random.default_rng([int(seed), *[int(s) for s in stream]])


def config_hash(config):
    """
    Returns the first 12 hex characters of the SHA-256 of a config's canonical JSON

    Parameters
    ----------
    config : dict
        JSON-serialisable configuration

    Returns
    -------
    str
        short hash printed with every run
    """
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


@contextmanager
def stage_timer(timings, stage):
    """Adds the wall-clock seconds spent inside the block to ``timings[stage]``."""
    start = time.perf_counter()
    try:
        yield
    finally:
        timings[stage] = timings.get(stage, 0.0) + time.perf_counter() - start


def mean_std_summary(rows, group_by, columns):
    """
    Returns mean and std of sweep metrics across seeds

    Parameters
    ----------
    rows : list of dict or pandas DataFrame
        one entry per completed grid point
    group_by : list of str
        columns identifying a configuration (everything except the seed)
    columns : list of str
        numeric columns to summarise

    Returns
    ----------
        pandas DataFrame with one "mean (+/- std)" string per metric
    """
    df = pd.DataFrame(rows)
    grouped = df.groupby(group_by, sort=False, dropna=False)[columns]
    mean_scores = grouped.mean()
    std_scores = grouped.std(ddof=0)

    out = pd.DataFrame(index=mean_scores.index)
    for col in columns:
        out[col] = [
            "%0.6g (+/- %0.3g)" % (m, s)
            for m, s in zip(mean_scores[col], std_scores[col])
        ]
    return out.reset_index()
