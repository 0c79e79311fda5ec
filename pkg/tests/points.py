"""Seeded parameter points for gradient checks."""

import itertools

import numpy as np

from vle.framelevel import DbofParams, LstmParams, PaddedSequences, dbof_kink_margin
from vle.linear import MoeParams

STEP = 1e-3


def _perturb(params, rng, scale=0.1):
    for arr in params.named_arrays().values():
        arr += rng.normal(0, scale, arr.shape)
    return params


def moe_point(seed):
    rng = np.random.default_rng([seed, 0])
    x = rng.normal(size=(3, 4))
    y = (rng.random((3, 3)) < 0.4).astype(float)
    return _perturb(MoeParams.init(3, 4, experts=2, seed=seed, lam=0.01), rng), x, y


def _sequences(rng):
    return PaddedSequences([rng.normal(size=(f, 3)) for f in (2, 5, 3)]), (rng.random((3, 4)) < 0.4).astype(float)


def lstm_point(seed):
    rng = np.random.default_rng([seed, 0])
    batch, y = _sequences(rng)
    return _perturb(LstmParams.init(4, 3, 5, num_layers=2, seed=seed, lam=0.01), rng), batch, y


def dbof_point(seed, step=STEP):
    """First seeded draw whose loss is smooth within +-step of every coordinate."""
    for attempt in itertools.count():
        rng = np.random.default_rng([seed, attempt])
        batch, y = _sequences(rng)
        params = _perturb(DbofParams.init(4, 3, width=6, seed=seed, lam=0.01), rng)
        if dbof_kink_margin(params, batch) > step:
            return params, batch, y
