"""Exact Kalman filtering for linear-Gaussian state-space models.

Used as the ground-truth oracle for log-marginal likelihoods and filtered
moments.
"""

from dataclasses import dataclass

import numpy as np

from .numerics import LOG_2PI, cholesky


@dataclass(frozen=True)
class KalmanBelief:
    mean: np.ndarray
    cov: np.ndarray


def kalman_step(belief, A, Q, C, R, y, bias=None):
    """One predict/update cycle.

    Returns the posterior belief over x_t and log p(y_t | y_{1:t-1}).  The
    covariance update uses the Joseph form so the result stays symmetric PSD.
    """
    A, Q, C, R = (np.atleast_2d(np.asarray(m, dtype=float)) for m in (A, Q, C, R))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    m_pred = A @ belief.mean
    P_pred = A @ belief.cov @ A.T + Q
    P_pred = 0.5 * (P_pred + P_pred.T)

    S = cholesky(0.5 * (C @ P_pred @ C.T + R + (C @ P_pred @ C.T + R).T))
    innov = y - C @ m_pred
    if bias is not None:
        innov = innov - bias
    alpha = S.solve(innov)
    loglik = -0.5 * (innov @ alpha) - 0.5 * (y.size * LOG_2PI + S.logdet())

    K = S.solve(C @ P_pred).T
    mean = m_pred + K @ innov
    IKC = np.eye(A.shape[0]) - K @ C
    cov = IKC @ P_pred @ IKC.T + K @ R @ K.T
    return KalmanBelief(mean, 0.5 * (cov + cov.T)), float(loglik)


def kalman_filter(ys, A, Q, C, R, m0, P0, bias=None):
    """Run the recursion over a whole sequence.

    Returns (means (T, d), covariances (T, d, d), per-step log predictive densities (T,)).
    """
    ys = np.asarray(ys, dtype=float)
    belief = KalmanBelief(np.asarray(m0, dtype=float), np.atleast_2d(np.asarray(P0, dtype=float)))
    d = belief.mean.size
    T = ys.shape[0]
    means = np.zeros((T, d))
    covs = np.zeros((T, d, d))
    lls = np.zeros(T)
    for t in range(T):
        belief, lls[t] = kalman_step(belief, A, Q, C, R, ys[t], bias)
        means[t] = belief.mean
        covs[t] = belief.cov
    return means, covs, lls


def kalman_nll(ys, model):
    """Negative log marginal likelihood -sum_t log p(y_t | y_{1:t-1}) of a linear-Gaussian model."""
    ys = np.asarray(ys, dtype=float)
    if ys.shape[0] == 0:
        return 0.0
    _, _, lls = kalman_filter(ys, *linear_gaussian_matrices(model))
    return -float(np.sum(lls))


def linear_gaussian_matrices(model):
    """(A, Q, C, R, m0, P0, bias) of a StateSpaceModel with linear dynamics and Gaussian emission."""
    dyn, em = model.dynamics, model.emission
    if getattr(dyn, "kind", None) != "linear" or getattr(em, "kind", None) != "gaussian":
        raise TypeError("Kalman filtering needs linear dynamics and a Gaussian emission")
    return dyn.A, dyn.Q.matrix, em.C, em.R.matrix, model.m0, model.P0.matrix, em.bias
