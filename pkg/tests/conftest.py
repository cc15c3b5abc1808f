import math

import pytest

from mta.events import Event, EventKind, ObservationWindow, UserPath
from mta.intensity import (
    INTERCEPT,
    CoefficientKey,
    FeatureEquals,
    IntensityModel,
    ModelSpec,
    StepBasis,
    TermSpec,
)


def ad(t, shown=True, **features):
    return Event(EventKind.AD, float(t), shown, features)


def conv(t):
    return Event(EventKind.CONVERSION, float(t))


def make_path(user_id="u", events=(), window=(0.0, 30.0), **user_features):
    return UserPath(user_id, ObservationWindow(*window), tuple(events), user_features)


def step_model(multipliers=(2.0, 1.5, 1.2), boundaries=(1.0, 2.0, 30.0), baseline=1.0 / 30.0, name="ad"):
    spec = ModelSpec((TermSpec(name, StepBasis(tuple(boundaries))),))
    coefs = {INTERCEPT: math.log(baseline)}
    coefs.update({CoefficientKey(name, l, ""): math.log(m) for l, m in enumerate(multipliers)})
    return IntensityModel(spec, coefs)


def typed_model(factors, baseline=1.0, horizon=30.0):
    """One always-on (single bucket) multiplier per ad type '1'..'n'."""
    terms = tuple(
        TermSpec(f"a{i + 1}", StepBasis((horizon,)), conditioning=FeatureEquals("type", str(i + 1)))
        for i in range(len(factors))
    )
    coefs = {INTERCEPT: math.log(baseline)}
    coefs.update({CoefficientKey(f"a{i + 1}", 0, str(i + 1)): math.log(f) for i, f in enumerate(factors)})
    return IntensityModel(ModelSpec(terms), coefs)


@pytest.fixture
def s1_model():
    return step_model()
