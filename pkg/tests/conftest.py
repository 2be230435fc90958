import numpy as np
import pandas as pd
from pytest import fixture


@fixture
def rng(request):
    from numpy.random import default_rng

    return default_rng(getattr(request.config.option, "randomly_seed", None))


@fixture(autouse=True)
def warnings_as_errors(request):
    from warnings import simplefilter

    pd.set_option("mode.chained_assignment", "raise")
    simplefilter("error", FutureWarning)
    simplefilter("error", PendingDeprecationWarning)
    simplefilter("error", DeprecationWarning)


@fixture(autouse=True)
def save_confsafe_registries():
    from copy import copy
    from confsafe.autoconf import confsafe_registries

    saves = {
        k: (copy(v.configs), copy(v.factories))
        for k, v in confsafe_registries().items()
    }

    yield

    for name, registry in confsafe_registries().items():
        registry.configs = saves[name][0]
        registry.factories = saves[name][1]


@fixture
def chdir_tmp(tmp_path):
    from os import chdir
    from pathlib import Path

    path = Path.cwd()
    chdir(tmp_path)
    yield tmp_path
    chdir(path)


@fixture
def linear_model():
    """Calibrated model set around ``x' = 0.5 x + u`` with a known spread."""
    from confsafe.core import Box, NoiseModel
    from confsafe.models import FunctionModel

    def mean(states, actions):
        return 0.5 * states + actions[:, :1]

    def stddev(states, actions):
        return np.full_like(states, 0.01)

    return FunctionModel(
        mean, stddev, beta=1.0, noise=NoiseModel.zero(1), action_box=Box.symmetric(1.0)
    )
