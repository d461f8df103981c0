"""Shared fixtures: the standard desk-scale instances used across tests."""

from __future__ import annotations

import numpy as np
import pytest

from sparsewatch import (
    BasisDictionary,
    ModelConfig,
    bspline_basis,
    fourier_basis,
)


@pytest.fixture(scope="session")
def default_dictionary() -> BasisDictionary:
    """p=15 with a 3-column Fourier background and a 10-column cubic spline anomaly basis."""
    return BasisDictionary(
        b_b=fourier_basis(15, 3), b_a=bspline_basis(15, 4, 14)
    )


@pytest.fixture(scope="session")
def default_config(default_dictionary) -> ModelConfig:
    return ModelConfig.homogeneous(
        k_a=default_dictionary.k_a,
        sigma_e=0.05,
        sigma_b=0.3,
        sigma_j=3.0,
        w=0.1,
        v=1e-7,
        decay=0.1,
        m=5,
    )


@pytest.fixture()
def small_dictionary() -> BasisDictionary:
    """p=6 instance small enough for exhaustive checks."""
    return BasisDictionary(b_b=fourier_basis(6, 2), b_a=bspline_basis(6, 2, 6))


@pytest.fixture()
def small_config(small_dictionary) -> ModelConfig:
    return ModelConfig.homogeneous(
        k_a=small_dictionary.k_a,
        sigma_e=0.1,
        sigma_b=0.5,
        sigma_j=2.0,
        w=0.2,
        v=1e-6,
        decay=0.1,
        m=3,
    )


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(20240817)
