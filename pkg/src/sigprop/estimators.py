"""scikit-learn style front end.

``CovarianceExtractor`` turns token matrices into initial conditions
``(q0, p0)``; ``ApjnTheory`` maps initial conditions to predicted APJN
curves; ``ApjnMeasurement`` maps token matrices to measured curves. They
compose in a ``Pipeline`` and support ``get_params`` / ``set_params`` and
``clone``.
"""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .apjn import backward_extended, backward_simplified, forward_extended, forward_simplified
from .covariance import ModelHyper, run_trajectory
from .errors import DomainError
from .kernels import CovPair
from .measurement import GAUSSIAN, backward_apjn_blocks
from .simulator import TransformerConfig, token_statistics

__all__ = ["CovarianceExtractor", "ApjnTheory", "ApjnMeasurement"]


def _check_tokens(X):
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[1] < 2:
        raise ValueError(f"expected tokens of shape (n_samples, n, d) with n >= 2, got {X.shape}")
    return X


class CovarianceExtractor(TransformerMixin, BaseEstimator):
    """Position-averaged ``(q0, p0)`` of each token matrix.

    ``transform`` maps an array of shape ``(n_samples, n, d)`` (or a single
    ``(n, d)`` matrix) to ``(n_samples, 2)``.
    """

    def fit(self, X, y=None):
        X = _check_tokens(X)
        self.n_tokens_, self.n_features_in_ = X.shape[1:]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = _check_tokens(X)
        if X.shape[2] != self.n_features_in_:
            raise ValueError(f"X has width {X.shape[2]}, fitted with {self.n_features_in_}")
        return np.array([token_statistics(x) for x in X])


class ApjnTheory(BaseEstimator):
    """Predicted block-level APJN curves from initial conditions.

    Parameters
    ----------
    sigma_21, sigma_ov : float
    phi : str
        ``"layernorm"``, ``"erf:<alpha>"`` or ``"tanh:<alpha>"``.
    blocks : int
    context_n : int or None
        ``None`` selects the large-``n`` limit.
    direction : {"backward", "forward"}
    extended : bool
        Use the joint ``(J, K)`` recurrences (needs ``context_n``).

    Examples
    --------
    >>> est = ApjnTheory(sigma_21=0.6, sigma_ov=0.3, blocks=4).fit([[1.0, 0.2]])
    >>> est.predict([[1.0, 0.2]]).shape
    (1, 5)
    """

    def __init__(self, sigma_21=0.61, sigma_ov=0.31, phi="layernorm", blocks=12, context_n=None,
                 direction="backward", extended=False):
        self.sigma_21 = sigma_21
        self.sigma_ov = sigma_ov
        self.phi = phi
        self.blocks = blocks
        self.context_n = context_n
        self.direction = direction
        self.extended = extended

    def _validate(self):
        if self.direction not in ("backward", "forward"):
            raise ValueError(f"direction must be 'backward' or 'forward', got {self.direction!r}")
        n = math.inf if self.context_n is None else self.context_n
        return ModelHyper(self.sigma_ov, self.sigma_21, n, self.phi)

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != 2:
            raise ValueError(f"expected initial conditions of shape (n_samples, 2), got {X.shape}")
        self.hyper_ = self._validate()
        self.n_features_in_ = 2
        return self

    def trajectory(self, x):
        check_is_fitted(self, "hyper_")
        return run_trajectory(CovPair(*x), self.hyper_, self.blocks)

    def predict(self, X):
        """Block-level curves of shape ``(n_samples, blocks + 1)`` over ``b = 0..B``."""
        check_is_fitted(self, "hyper_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != 2:
            raise ValueError(f"expected initial conditions of shape (n_samples, 2), got {X.shape}")
        if self.extended:
            fn = backward_extended if self.direction == "backward" else forward_extended
        else:
            fn = backward_simplified if self.direction == "backward" else forward_simplified
        return np.array([fn(self.trajectory(x)).block_values for x in X])


class ApjnMeasurement(TransformerMixin, BaseEstimator):
    """Measured backward APJN curves ``J^{B,b}`` of the toy transformer.

    ``transform`` maps tokens of shape ``(n_samples, n, d)`` to curves of
    shape ``(n_samples, blocks + 1)``; the standard errors of the last call
    are kept in ``std_errors_``.
    """

    def __init__(self, sigma_21=0.61, sigma_ov=0.31, phi="layernorm", blocks=12, heads=1,
                 attention_mode="softmax", final_norm=False, n_probes=10, n_seeds=8, probe=GAUSSIAN,
                 seed=0, workers=1):
        self.sigma_21 = sigma_21
        self.sigma_ov = sigma_ov
        self.phi = phi
        self.blocks = blocks
        self.heads = heads
        self.attention_mode = attention_mode
        self.final_norm = final_norm
        self.n_probes = n_probes
        self.n_seeds = n_seeds
        self.probe = probe
        self.seed = seed
        self.workers = workers

    def _config(self, n, d):
        return TransformerConfig.from_products(
            self.sigma_21, self.sigma_ov, d=d, n=n, blocks=self.blocks, heads=self.heads, norm=self.phi,
            final_norm=self.final_norm, attention_mode=self.attention_mode, seed=self.seed)

    def fit(self, X, y=None):
        X = _check_tokens(X)
        self.n_tokens_, self.n_features_in_ = X.shape[1:]
        self.config_ = self._config(*X.shape[1:])
        return self

    def transform(self, X):
        check_is_fitted(self, "config_")
        X = _check_tokens(X)
        if X.shape[1:] != (self.n_tokens_, self.n_features_in_):
            raise ValueError(f"X has token shape {X.shape[1:]}, fitted with {(self.n_tokens_, self.n_features_in_)}")
        curves, errors = [], []
        for x in X:
            est = backward_apjn_blocks(self.config_, x, self.n_probes, self.n_seeds,
                                       through_final=self.final_norm, probe=self.probe, workers=self.workers)
            curves.append([e.value for e in est])
            errors.append([e.std_error for e in est])
        self.std_errors_ = np.array(errors)
        return np.array(curves)
