import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from apcre.effects import decompose_effect


def test_straight_line():
    d = decompose_effect([1, 2, 3])
    assert d.level == 2 and d.linear_slope == 1
    np.testing.assert_allclose(d.nonlinear, 0, atol=1e-15)


def test_symmetric_curvature():
    d = decompose_effect([1, 0, 1])
    assert d.level == pytest.approx(2 / 3)
    assert d.linear_slope == 0
    np.testing.assert_allclose(d.nonlinear, [1 / 3, -2 / 3, 1 / 3], atol=1e-15)


def test_needs_two_levels():
    with pytest.raises(ValueError):
        decompose_effect([1.0])


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(2, 30), elements=st.floats(-1e3, 1e3)))
def test_reconstruction_and_orthogonality(v):
    d = decompose_effect(v)
    scale = max(1.0, np.max(np.abs(v)))
    np.testing.assert_allclose(d.reconstruct(), v, atol=1e-10 * scale)
    x = d.centered_index
    assert abs(d.nonlinear.sum()) < 1e-9 * scale * len(v)
    assert abs(x @ d.nonlinear) < 1e-9 * scale * len(v) ** 2
