"""Approximate-KKT certificates for the minimum-norm separation problem

    minimize   1/2 ||W||^2 + 1/2 ||H||^2
    subject to w_k.h_{k,i} - w_j.h_{k,i} >= 1   for all j != k, i.

Written in ``g(x) <= 0`` form each constraint is ``1 - s_{k,i,j} <= 0``, so
stationarity reads ``theta - sum lambda grad s = 0`` and complementary
slackness is measured by ``lambda (s - 1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import (
    InvalidInputError,
    ParameterPoint,
    gradient,
    loss,
    margins,
    score_gaps,
    smoothed_margin,
    softmax_residual,
)

FEASIBILITY_TOL = 1e-12


class NotSeparatedError(InvalidInputError):
    """The point does not separate the data (``q_min <= 0``)."""


@dataclass(frozen=True, eq=False)
class KktCertificate:
    """Multipliers and residuals for ``normalized_point = theta / sqrt(q_min)``.

    ``lambdas`` has shape ``(K, n, K)`` with zeros on the unused ``j == k``
    slots. ``eps``/``delta`` are computed directly from the multipliers;
    ``delta`` is the worst single constraint and ``delta_sum`` the total.
    ``eps_bound``/``delta_bound`` are the closed forms in terms of the
    velocity cosine ``beta``, smoothed margin ``gamma_tilde`` and ``q_min``.
    """

    lambdas: np.ndarray
    eps: float
    delta: float
    delta_sum: float
    eps_bound: float
    delta_bound: float
    normalized_point: ParameterPoint
    feasible: bool
    q_min: float
    beta: float
    gamma_tilde: float


def multiplier_matrix(lambdas: np.ndarray) -> np.ndarray:
    """Fold ``(K, n, K)`` multipliers into the ``K x nK`` matrix ``M`` with

    ``sum lambda grad_W s = M H^T`` and ``sum lambda grad_H s = W^T M``.
    Column ``(k, i)`` carries ``+sum_j lambda_{k,i,j}`` in row ``k`` and
    ``-lambda_{k,i,j}`` in each row ``j``.
    """
    K, n, _ = lambdas.shape
    lam = lambdas.copy()
    lam[np.arange(K), :, np.arange(K)] = 0.0
    M = -lam.reshape(K * n, K).T
    labels = np.repeat(np.arange(K), n)
    M[labels, np.arange(K * n)] = lam.reshape(K * n, K).sum(axis=1)
    return M


def kkt_residuals(p: ParameterPoint, lambdas: np.ndarray) -> tuple[float, float, float]:
    """``(eps, delta_max, delta_sum)`` of a candidate point under given multipliers."""
    lambdas = np.asarray(lambdas, dtype=float)
    shape = p.shape
    if lambdas.shape != (shape.K, shape.n, shape.K):
        raise InvalidInputError(
            f"lambdas must have shape {(shape.K, shape.n, shape.K)}, got {lambdas.shape}"
        )
    if np.any(lambdas < 0):
        raise InvalidInputError("multipliers must be nonnegative")
    M = multiplier_matrix(lambdas)
    rW = p.W - M @ p.H.T
    rH = p.H - p.W.T @ M
    eps = math.sqrt(float(np.sum(rW**2) + np.sum(rH**2)))
    s = score_gaps(p)
    off = ~np.eye(shape.K, dtype=bool)[:, None, :].repeat(shape.n, axis=1)
    slack = lambdas[off] * (s[off] - 1.0)
    return eps, max(float(np.max(slack)), 0.0), float(np.sum(slack))


def lambdas_from_matrix(Lam: np.ndarray, n: int = 1) -> np.ndarray:
    """Expand a ``K x K`` class-pair multiplier table to ``(K, n, K)``."""
    Lam = np.asarray(Lam, dtype=float)
    return np.repeat(Lam[:, None, :], n, axis=1)


def certificate(p: ParameterPoint) -> KktCertificate:
    """Build the gradient-flow multipliers at ``p`` and measure how KKT they are.

    ``lambda_{k,i,j} = (rho / ||g||) * exp(-s_{k,i,j}) / (1 + sum_l exp(-s_{k,i,l}))``
    with ``g = -grad L``; the wrong-class softmax probabilities are exactly the
    ratio on the right.
    """
    shape = p.shape
    K, n = shape.K, shape.n
    q_min = margins(p).q_min
    if not q_min > 0:
        raise NotSeparatedError(f"q_min = {q_min:g} <= 0: point does not separate the data")

    G = softmax_residual(p)
    gW, gH = gradient(p)
    gnorm = math.sqrt(float(np.sum(gW**2) + np.sum(gH**2)))
    rho = p.rho
    if gnorm < 1e-300:
        raise InvalidInputError("gradient underflowed; multipliers undefined")

    probs = G.T.reshape(K, n, K).copy()  # row (k,i), entry j: softmax prob of class j
    probs[np.arange(K), :, np.arange(K)] = 0.0
    lambdas = (rho / gnorm) * probs

    tilde = p.scaled(1.0 / math.sqrt(q_min))
    eps, delta, delta_sum = kkt_residuals(tilde, lambdas)

    # 1 - beta from the distance between unit vectors keeps precision as beta -> 1
    dW = p.W / rho + gW / gnorm
    dH = p.H / rho + gH / gnorm
    one_minus_beta = 0.5 * float(np.sum(dW**2) + np.sum(dH**2))
    gamma = smoothed_margin(loss(p), p.rho_sq)
    if math.isfinite(gamma) and gamma > 0:
        eps_bound = math.sqrt(2.0 * one_minus_beta / gamma)
        delta_bound = K**2 * (K - 1) * n / (2.0 * math.e * gamma * q_min)
    else:
        eps_bound = delta_bound = math.nan

    return KktCertificate(
        lambdas=lambdas,
        eps=eps,
        delta=delta,
        delta_sum=delta_sum,
        eps_bound=eps_bound,
        delta_bound=delta_bound,
        normalized_point=tilde,
        feasible=separation_feasible(tilde),
        q_min=q_min,
        beta=1.0 - one_minus_beta,
        gamma_tilde=gamma,
    )


@dataclass(frozen=True, eq=False)
class MfcqResult:
    holds: bool
    witness: ParameterPoint | None
    violating_index: tuple[int, int, int] | None


def mfcq_check(p: ParameterPoint) -> MfcqResult:
    """Use ``v = theta`` as the witness: ``<grad s_{k,i,j}, theta> = 2 s_{k,i,j}``."""
    rep = margins(p)
    if rep.q_min > 0:
        return MfcqResult(True, p, None)
    return MfcqResult(False, None, rep.argmin_index)


def separation_feasible(p: ParameterPoint, tol: float = FEASIBILITY_TOL) -> bool:
    return margins(p).q_min >= 1.0 - tol


def unit_margin_point(p: ParameterPoint) -> ParameterPoint:
    """Rescale a separating point so its smallest gap is exactly 1."""
    q = margins(p).q_min
    if not q > 0:
        raise NotSeparatedError(f"q_min = {q:g} <= 0")
    return p.scaled(1.0 / math.sqrt(q))


def min_norm_objective(p: ParameterPoint) -> float:
    """Objective ``(||W||^2 + ||H||^2) / 2`` after rescaling to unit margin."""
    return unit_margin_point(p).rho_sq / 2.0
