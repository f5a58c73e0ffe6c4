import math

import numpy as np
import pytest

from cspacedist.ode import DivergenceError, rk4


def test_exponential_decay_fourth_order():
    errs = []
    for n in (10, 20, 40):
        (y,) = rk4(lambda t, s: (-s[0],), (np.array([1.0]),), 0.0, 1.0, n)
        errs.append(abs(y[0] - math.exp(-1)))
    assert errs[0] / errs[1] == pytest.approx(16, rel=0.1)
    assert errs[1] / errs[2] == pytest.approx(16, rel=0.1)
    assert errs[1] < 1e-7


def test_time_dependent_polynomial_is_exact():
    # RK4 integrates cubic-in-t right-hand sides exactly
    (y,) = rk4(lambda t, s: (np.array([3 * t ** 2]),), (np.zeros(1),), 0.0, 1.0, 3)
    assert y[0] == pytest.approx(1.0, abs=1e-14)


def test_backward_integration_inverts_forward():
    f = lambda t, s: (np.array([s[0][1], -s[0][0]]) * (1 + t),)  # noqa: E731
    y0 = np.array([0.3, -0.8])
    (y1,) = rk4(f, (y0,), 0.0, 1.0, 40)
    (back,) = rk4(f, (y1,), 1.0, 0.0, 40)
    np.testing.assert_allclose(back, y0, atol=1e-6)


def test_tuple_state_structure():
    z, acc = rk4(lambda t, s: (np.ones(2), np.array(2.0)), (np.zeros(2), np.array(0.0)), 0.0, 0.5, 5)
    np.testing.assert_allclose(z, [0.5, 0.5])
    assert float(acc) == pytest.approx(1.0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_blowup_and_bad_step_count():
    with pytest.raises(DivergenceError):
        rk4(lambda t, s: (s[0] ** 2,), (np.array([1.0]),), 0.0, 10.0, 10)
    with pytest.raises(ValueError):
        rk4(lambda t, s: s, (np.zeros(1),), 0.0, 1.0, 0)
