import numpy as np
import pytest

from gaprppg._validation import (
    ValidationError,
    check_positive,
    check_random_state,
    check_range,
    check_series,
    check_stmap_array,
)


def test_check_series_rejects_nan_and_short():
    with pytest.raises(ValidationError):
        check_series([1.0, np.nan])
    with pytest.raises(ValidationError):
        check_series([1.0], min_length=2)
    assert check_series([1, 2, 3]).dtype == np.float64


def test_check_series_rejects_2d():
    with pytest.raises(ValidationError):
        check_series(np.zeros((2, 2)))


def test_positive_and_range():
    assert check_positive(2, "x") == 2.0
    with pytest.raises(ValidationError):
        check_positive(0, "x")
    with pytest.raises(ValidationError):
        check_range(5, 0, 1, "x")


def test_stmap_array_shape_rules():
    assert check_stmap_array(np.zeros((10, 4, 3))).shape == (10, 4, 3)
    with pytest.raises(ValidationError):
        check_stmap_array(np.zeros((10, 4)))
    with pytest.raises(ValidationError):
        check_stmap_array(np.zeros((10, 4, 2)))
    with pytest.raises(ValidationError):
        check_stmap_array(np.zeros((3, 4, 3)), min_length=5)


def test_random_state_is_reproducible():
    a = check_random_state(5).random(3)
    b = check_random_state(5).random(3)
    np.testing.assert_array_equal(a, b)
    g = np.random.default_rng(0)
    assert check_random_state(g) is g
