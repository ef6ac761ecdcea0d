import numpy as np
import pytest

from ctrlgeom import ControlAffineSystem, StrictFeedbackSystem, TransverseManifold


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture
def pendulum():
    """dx1 = x2, dx2 = -sin(x1) + u; singular set is the x1 axis."""
    return ControlAffineSystem.from_strings(
        ["x1", "x2"], ["x2", "-sin(x1)"], [["0", "1"]]
    )


@pytest.fixture
def parabola():
    """dx1 = x1^2 + x2, dx2 = u; singular set is x2 = -x1^2."""
    return ControlAffineSystem.from_strings(
        ["x1", "x2"], ["x1^2 + x2", "0"], [["0", "1"]]
    )


@pytest.fixture
def canonical3():
    """Chain of integrators, n = 3, with a generic last row."""
    return ControlAffineSystem.from_strings(
        ["x1", "x2", "x3"],
        ["x2", "x3", "-1.0*x1 - 2.0*x2 - 3.0*x3"],
        [["0", "0", "1"]],
    )


@pytest.fixture
def pendulum_surface():
    """Graph x2 = -0.5 x1, transverse to the pendulum's control direction."""
    return TransverseManifold.from_strings(["x1", "x2"], ind=[0], dep=[1], h=["-0.5*x1"])


@pytest.fixture
def strict_parabola():
    """dx1 = x1^2 + x2, dx2 = u in strict-feedback form."""
    return StrictFeedbackSystem.from_strings(["x1", "x2"], ["x1^2", "0"], ["1", "1"])


def canonical_system(n, a=None, rng=None):
    """Controller-canonical single-input chain of order n."""
    states = [f"x{i+1}" for i in range(n)]
    if a is None:
        a = rng.standard_normal(n)
    drift = [states[i + 1] for i in range(n - 1)]
    last = " + ".join(f"{-a[i]}*{states[i]}" for i in range(n))
    drift.append(last)
    controls = [["0"] * (n - 1) + ["1"]]
    return ControlAffineSystem.from_strings(states, drift, controls), np.asarray(a)
