"""Input validation helpers shared by the estimators and metric functions."""

import numpy as np

UNIT_NORM_TOL = 1e-9


class NumericalError(RuntimeError):
    """Raised when a computation produces non-finite values."""


class RankDeficiencyError(ValueError):
    """Raised when a fold does not carry enough independent samples."""


def check_embeddings(X, *, dim=None, unit=False, tol=UNIT_NORM_TOL, name="X"):
    """Validate a 2-d float array of embeddings and return it as float64.

    A 1-d input is treated as a single row.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[np.newaxis, :]
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-dimensional, got shape {X.shape}")
    if X.shape[1] == 0:
        raise ValueError(f"{name} has zero features")
    if dim is not None and X.shape[1] != dim:
        raise ValueError(f"{name} has {X.shape[1]} features, expected {dim}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains NaN or infinite values")
    if unit:
        norms = np.linalg.norm(X, axis=1)
        bad = np.abs(norms - 1.0) > tol
        if np.any(bad):
            worst = float(np.max(np.abs(norms - 1.0)))
            raise ValueError(f"{name} rows must be unit-norm (max deviation {worst:.3g})")
    return X


def check_scores(scores, name="scores"):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.size == 0:
        raise ValueError(f"{name} must be nonempty")
    if np.any(np.isnan(scores)):
        raise ValueError(f"{name} contains NaN")
    return scores


def check_probability(value, name):
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value}")
    return value


def check_positive_int(value, name):
    if isinstance(value, bool) or int(value) != value or value <= 0:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def normalize_rows(X):
    norms = np.linalg.norm(X, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cannot normalize a zero vector")
    return X / norms
