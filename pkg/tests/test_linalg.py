"""Pivoted log-determinant and inverse against closed forms and cofactors."""

import numpy as np
import pytest

from ncsr.linalg import SingularMatrixError, SquareMatrix, logdet_and_inverse
from ncsr.rng import Rng


def cofactor_det(m: np.ndarray) -> float:
    """Brute-force determinant by first-row cofactor expansion."""
    n = m.shape[0]
    if n == 1:
        return float(m[0, 0])
    total = 0.0
    for j in range(n):
        minor = np.delete(np.delete(m, 0, axis=0), j, axis=1)
        total += (-1.0) ** j * m[0, j] * cofactor_det(minor)
    return total


def test_identity():
    ld, inv = logdet_and_inverse(SquareMatrix(np.eye(3)))
    assert ld == 0.0
    assert np.array_equal(inv.entries, np.eye(3))


def test_diagonal_closed_form():
    ld, inv = logdet_and_inverse(SquareMatrix(np.diag([2.0, 3.0])))
    assert abs(ld - np.log(6.0)) < 1e-15
    assert np.allclose(inv.entries, np.diag([0.5, 1.0 / 3.0]))


def test_random_4x4_matches_cofactor_expansion():
    rng = Rng(11)
    worst = 0.0
    for _ in range(20):
        m = rng.gaussian((4, 4), 1.0) + 3.0 * np.eye(4)
        ld, _ = logdet_and_inverse(SquareMatrix(m))
        worst = max(worst, abs(ld - np.log(abs(cofactor_det(m)))))
    assert worst < 1e-9


def test_inverse_roundtrip_identity():
    rng = Rng(5)
    for _ in range(10):
        m = rng.gaussian((6, 6), 1.0) + 4.0 * np.eye(6)
        _, inv = logdet_and_inverse(SquareMatrix(m))
        rel = np.abs(m @ inv.entries - np.eye(6)).max()
        assert rel < 1e-6


def test_logdet_inverse_cancellation():
    rng = Rng(8)
    for _ in range(10):
        m = rng.gaussian((5, 5), 1.0) + 3.0 * np.eye(5)
        ld, inv = logdet_and_inverse(SquareMatrix(m))
        ld_inv, _ = logdet_and_inverse(inv)
        assert abs(np.exp(ld) * np.exp(ld_inv) - 1.0) < 1e-9


def test_singular_matrix_names_pivot():
    m = np.array([[1.0, 2.0, 3.0],
                  [2.0, 4.0, 6.0],
                  [1.0, 0.0, 1.0]])
    with pytest.raises(SingularMatrixError) as err:
        logdet_and_inverse(SquareMatrix(m))
    assert "pivot" in str(err.value)


def test_non_square_rejected():
    with pytest.raises(ValueError):
        SquareMatrix(np.zeros((2, 3)))
