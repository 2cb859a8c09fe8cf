"""Log-linear conditional model over a feature matrix.

Probabilities are outcome-given-context: p(y | x) = exp(theta . f(x, y)) / Z(x)
with the partition sum running over the outcome alphabet.  All internal
logs are natural; base 2 appears only at reporting boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import FeatureMatrix


@dataclass
class PredictiveDistribution:
    """Probability vector over the outcome alphabet for one context."""

    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        total = self.probs.sum()
        if not np.isfinite(total) or abs(total - 1.0) > 1e-9 or (self.probs < 0).any():
            raise ValueError("probabilities must be nonnegative and sum to one")

    @property
    def log2_probs(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log2(self.probs)

    def argmax_lowest(self) -> int:
        """Index of the maximum; exact ties resolve to the lowest index."""
        return int(np.argmax(self.probs))

    @staticmethod
    def uniform(n: int) -> "PredictiveDistribution":
        return PredictiveDistribution(np.full(n, 1.0 / n))


@dataclass
class ObjectiveValue:
    """Summed negative log-likelihood (natural log) with per-datum mean."""

    nll: float
    n_data: int

    @property
    def mean(self) -> float:
        return self.nll / self.n_data if self.n_data else 0.0


def _scores(m: FeatureMatrix, theta: np.ndarray) -> np.ndarray:
    """Raw linear scores, shape (n_data, n_outcomes)."""
    flat = m.matrix @ theta
    return np.asarray(flat).reshape(m.n_data, m.n_outcomes)


def _log_probs(scores: np.ndarray) -> np.ndarray:
    shift = scores - scores.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shift).sum(axis=1, keepdims=True))
    return shift - log_z


def predict(m: FeatureMatrix, theta: np.ndarray, datum: int) -> PredictiveDistribution:
    """Distribution for one datum, computed with max-subtraction."""
    scores = np.asarray(m.datum_slice(datum) @ theta).ravel()
    shift = scores - scores.max()
    exp = np.exp(shift)
    return PredictiveDistribution(exp / exp.sum())


def predict_all(m: FeatureMatrix, theta: np.ndarray) -> np.ndarray:
    """All datum distributions at once, shape (n_data, n_outcomes)."""
    return np.exp(_log_probs(_scores(m, theta)))


def objective(m: FeatureMatrix, theta: np.ndarray) -> ObjectiveValue:
    """Negative log-likelihood of the true outcomes, summed over data."""
    logp = _log_probs(_scores(m, theta))
    picked = logp[np.arange(m.n_data), m.true_outcome]
    return ObjectiveValue(float(-picked.sum()), m.n_data)


def batch_loss_and_gradient(
    m: FeatureMatrix, theta: np.ndarray, batch: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """NLL and its gradient restricted to a batch of datum indices.

    Returns (loss, gradient over all features, indices of features firing
    in the batch).  Only firing features can have nonzero gradient; the
    index set is reported so the optimizer can update lazily.
    """
    batch = np.asarray(batch, dtype=np.int64)
    if batch.size == 0:
        raise ValueError("batch must be non-empty")
    rows = m.rows_for(batch)
    sub = m.matrix[rows]
    scores = np.asarray(sub @ theta).reshape(batch.size, m.n_outcomes)
    logp = _log_probs(scores)
    probs = np.exp(logp)

    truth = m.true_outcome[batch]
    loss = float(-logp[np.arange(batch.size), truth].sum())

    diff = probs.copy()
    diff[np.arange(batch.size), truth] -= 1.0
    grad = np.asarray(sub.T @ diff.ravel()).ravel()
    touched = np.nonzero(np.asarray(sub.getnnz(axis=0)).ravel() > 0)[0]
    return loss, grad, touched


def gradient(
    m: FeatureMatrix, theta: np.ndarray, batch: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Moment-matching gradient (model expectation minus empirical counts)."""
    _, grad, touched = batch_loss_and_gradient(m, theta, batch)
    return grad, touched
