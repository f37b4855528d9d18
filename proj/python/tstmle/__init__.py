"""Two-stage TMLE for cluster randomized trials with counterfactual strata outcomes."""

import json

from . import _core
from ._core import DataError, EndpointUndefined, endpoint

__all__ = [
    "DataError",
    "EndpointUndefined",
    "analyze",
    "endpoint",
    "simulate",
    "standard_estimators",
    "summary",
    "truth",
]


def simulate(sim=None, seed=1, rep=0):
    """Simulated trial as canonical CSV text."""
    return _core.simulate_csv(json.dumps(sim or {}), seed, rep)


def truth(sim=None, seed=1, threads=1):
    """Monte Carlo true effect and its bookkeeping."""
    return json.loads(_core.truth_json(json.dumps(sim or {}), seed, threads))


def analyze(csv, estimator=None, seed=1):
    """Effect estimate for one trial given as CSV text."""
    return json.loads(_core.analyze_json(csv, json.dumps(estimator or {}), seed))


def standard_estimators(adjust_l=False):
    return json.loads(_core.standard_estimators_json(adjust_l))


def summary(sim=None, estimators=None, reps=10, seed=1, threads=1):
    """Summary CSV text of a simulation study."""
    return _core.summary_csv(json.dumps(sim or {}), json.dumps(estimators or []), reps, seed, threads)
