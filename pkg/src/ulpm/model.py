"""Unconstrained layer-peeled model: parameters, cross-entropy objective, margins.

Layout contract: ``W`` is ``K x d`` with row ``k`` the classifier ``w_k``;
``H`` is ``d x (n K)`` with column ``k * n + i`` the feature ``h_{k,i}``
(class-major order). All arithmetic is float64.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np


class InvalidInputError(ValueError):
    """Raised for non-finite entries or inconsistent shapes."""


@dataclass(frozen=True)
class ProblemShape:
    K: int
    n: int
    d: int

    def __post_init__(self):
        if self.K < 2:
            raise InvalidInputError(f"class count K must be >= 2, got {self.K}")
        if self.n < 1:
            raise InvalidInputError(f"samples per class n must be >= 1, got {self.n}")
        if self.d < 1:
            raise InvalidInputError(f"feature dimension d must be >= 1, got {self.d}")

    @property
    def warnings(self) -> list[str]:
        if self.d < self.K - 1:
            return [f"d={self.d} < K-1={self.K - 1}: no simplex ETF fits in this dimension"]
        return []

    @property
    def num_samples(self) -> int:
        return self.n * self.K

    def labels(self) -> np.ndarray:
        """Class index of every column of ``H``."""
        return np.repeat(np.arange(self.K), self.n)


@dataclass(frozen=True, eq=False)
class ParameterPoint:
    W: np.ndarray
    H: np.ndarray

    def __post_init__(self):
        W = np.asarray(self.W, dtype=np.float64)
        H = np.asarray(self.H, dtype=np.float64)
        if W.ndim != 2 or H.ndim != 2:
            raise InvalidInputError("W and H must be 2-d arrays")
        if W.shape[1] != H.shape[0]:
            raise InvalidInputError(
                f"W is {W.shape} but H is {H.shape}: inner dimensions differ"
            )
        if W.shape[0] < 2:
            raise InvalidInputError("W needs at least two classifier rows")
        if H.shape[1] % W.shape[0] != 0:
            raise InvalidInputError(
                f"H has {H.shape[1]} columns, not a multiple of K={W.shape[0]}"
            )
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(H))):
            raise InvalidInputError("parameter point has non-finite entries")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "H", H)

    @property
    def shape(self) -> ProblemShape:
        K, d = self.W.shape
        return ProblemShape(K=K, n=self.H.shape[1] // K, d=d)

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.W.ravel(), self.H.ravel()])

    @property
    def rho_sq(self) -> float:
        return float(np.sum(self.W**2) + np.sum(self.H**2))

    @property
    def rho(self) -> float:
        return math.sqrt(self.rho_sq)

    def scaled(self, alpha: float) -> "ParameterPoint":
        return ParameterPoint(alpha * self.W, alpha * self.H)

    def with_theta(self, theta: np.ndarray) -> "ParameterPoint":
        """Point of the same shape built from a flat parameter vector."""
        kd = self.W.size
        return ParameterPoint(
            theta[:kd].reshape(self.W.shape), theta[kd:].reshape(self.H.shape)
        )

    def __add__(self, other: "ParameterPoint") -> "ParameterPoint":
        return ParameterPoint(self.W + other.W, self.H + other.H)

    def inner(self, other: "ParameterPoint") -> float:
        return float(np.vdot(self.W, other.W) + np.vdot(self.H, other.H))


@dataclass(frozen=True)
class MarginReport:
    """Score gaps ``s[k, i, j] = w_k.h_{k,i} - w_j.h_{k,i}``; ``s[k, i, k]`` is +inf.

    ``argmin_index`` is the zero-based ``(k, i, j)`` attaining ``q_min``,
    lexicographically smallest on ties.
    """

    s: np.ndarray
    q_per_sample: np.ndarray
    q_min: float
    argmin_index: tuple[int, int, int]


def logits(p: ParameterPoint) -> np.ndarray:
    """``Z = W H``; entry ``[j, k*n + i]`` is ``w_j . h_{k,i}``."""
    return p.W @ p.H


def _true_logits(Z: np.ndarray, K: int, n: int) -> np.ndarray:
    cols = np.arange(n * K)
    return Z[np.repeat(np.arange(K), n), cols]


def score_gaps(p: ParameterPoint) -> np.ndarray:
    """All gaps as a ``(K, n, K)`` array with +inf on the ``j == k`` slots."""
    K, n, _ = p.shape.K, p.shape.n, p.shape.d
    Z = logits(p)
    gaps = _true_logits(Z, K, n)[None, :] - Z  # (K, nK), row j, column (k,i)
    s = gaps.T.reshape(K, n, K)
    s[np.arange(K), :, np.arange(K)] = np.inf
    return s


def _column_losses(s: np.ndarray) -> np.ndarray:
    """Per-sample ``log(1 + sum_{j!=k} exp(-s))`` from a gap array, overflow-safe."""
    neg = -s  # wrong-class logit minus true logit; -inf on the diagonal
    shift = np.maximum(np.max(neg, axis=-1), 0.0)
    tail = np.sum(np.exp(neg - shift[..., None]), axis=-1)
    # shift == 0 branch keeps full relative precision for tiny losses
    return np.where(
        shift > 0.0,
        shift + np.log(np.exp(-shift) + tail),
        np.log1p(tail),
    )


def loss(p: ParameterPoint) -> float:
    """Cross-entropy summed over all ``nK`` samples (no ``1/n`` normalization)."""
    return float(np.sum(_column_losses(score_gaps(p))))


def softmax_residual(p: ParameterPoint) -> np.ndarray:
    """``G = dL/dZ``: softmax probabilities minus the one-hot labels, ``K x nK``.

    The true-class entry is written as minus the sum of the wrong-class
    probabilities so that tiny residuals keep their relative accuracy.
    """
    shape = p.shape
    K, n = shape.K, shape.n
    Z = logits(p)
    labels = shape.labels()
    cols = np.arange(n * K)
    Zs = Z - np.max(Z, axis=0, keepdims=True)
    E = np.exp(Zs)
    P = E / np.sum(E, axis=0, keepdims=True)
    P[labels, cols] = 0.0
    P[labels, cols] = -np.sum(P, axis=0)
    return P


def gradient(p: ParameterPoint) -> tuple[np.ndarray, np.ndarray]:
    """Analytic ``(dL/dW, dL/dH) = (G H^T, W^T G)``."""
    G = softmax_residual(p)
    return G @ p.H.T, p.W.T @ G


def gradient_point(p: ParameterPoint) -> ParameterPoint:
    gW, gH = gradient(p)
    return ParameterPoint(gW, gH)


def loss_and_gradient(
    W: np.ndarray, H: np.ndarray, K: int, n: int
) -> tuple[float, np.ndarray, np.ndarray]:
    """Fused loss/gradient on raw arrays for the integrator's inner loop.

    Skips validation; callers guarantee shapes. Returns a non-finite loss
    instead of raising so divergence can be reported by the caller.
    """
    Z = W @ H
    labels = np.repeat(np.arange(K), n)
    cols = np.arange(n * K)
    with np.errstate(over="ignore", invalid="ignore"):
        zy = Z[labels, cols]
        neg = Z - zy[None, :]
        neg[labels, cols] = -np.inf
        shift = np.maximum(np.max(neg, axis=0), 0.0)
        E = np.exp(neg - shift[None, :])
        tail = np.sum(E, axis=0)
        col_loss = np.where(
            shift > 0.0, shift + np.log(np.exp(-shift) + tail), np.log1p(tail)
        )
        # wrong-class probabilities exp(z_j - z_y) / (1 + sum_l exp(z_l - z_y))
        P = E / (np.exp(-shift) + tail)[None, :]
        P[labels, cols] = -np.sum(P, axis=0)
    return float(np.sum(col_loss)), P @ H.T, W.T @ P


def margins(p: ParameterPoint) -> MarginReport:
    s = score_gaps(p)
    q = np.min(s, axis=-1)
    flat = int(np.argmin(s))  # C-order scan: first hit is lexicographically smallest
    k, i, j = np.unravel_index(flat, s.shape)
    return MarginReport(
        s=s,
        q_per_sample=q,
        q_min=float(s[k, i, j]),
        argmin_index=(int(k), int(i), int(j)),
    )


def margin_upper_bound(p: ParameterPoint, shape: ProblemShape | None = None) -> float:
    """``(||W||^2 + ||H||^2) / (2 (K-1) sqrt(n))``, the ceiling on ``q_min``."""
    shape = shape or p.shape
    return p.rho_sq / (2.0 * (shape.K - 1) * math.sqrt(shape.n))


def log_expm1(x: float) -> float:
    """``log(e^x - 1)``; -inf when ``x`` is below 1e-300."""
    if x < 1e-300:
        return -math.inf
    if x > 50.0:
        return x + math.log1p(-math.exp(-x))
    return math.log(math.expm1(x))


def smoothed_margin(loss_value: float, rho_sq: float) -> float:
    """``-log(e^L - 1) / rho^2``; nan when it saturates or ``rho`` is zero."""
    lem = log_expm1(loss_value)
    if not math.isfinite(lem) or rho_sq <= 0.0:
        return math.nan
    return -lem / rho_sq


def check_shape(p: ParameterPoint, shape: ProblemShape) -> None:
    if p.shape != shape:
        raise InvalidInputError(f"point has shape {p.shape}, expected {shape}")
    for msg in shape.warnings:
        warnings.warn(msg, stacklevel=2)
