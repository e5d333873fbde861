"""Simplex ETFs, exact neural-collapse points, and the collapse metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .model import InvalidInputError, ParameterPoint, ProblemShape

# below this an Avg(...) denominator is treated as zero
DENOM_FLOOR = 1e-15


class DimensionError(InvalidInputError):
    pass


@dataclass(frozen=True, eq=False)
class EtfFrame:
    """Columns of ``M`` (``d x K``) are the frame vectors; ``Q`` is its orthonormal factor."""

    M: np.ndarray
    Q: np.ndarray
    scale: float = 1.0

    @property
    def K(self) -> int:
        return self.M.shape[1]


def orthonormal_columns(d: int, K: int, rng: np.random.Generator) -> np.ndarray:
    """Random ``d x K`` matrix with orthonormal columns (sign-fixed QR of a Gaussian)."""
    Q, R = np.linalg.qr(rng.standard_normal((d, K)))
    signs = np.sign(np.diag(R))
    signs[signs == 0] = 1.0
    return Q * signs


def etf_from_basis(Q: np.ndarray, scale: float = 1.0) -> EtfFrame:
    d, K = Q.shape
    centering = np.eye(K) - np.ones((K, K)) / K
    M = scale * math.sqrt(K / (K - 1)) * Q @ centering
    return EtfFrame(M=M, Q=Q, scale=scale)


def make_etf(K: int, d: int, seed: int | None = None) -> EtfFrame:
    if K < 2:
        raise InvalidInputError(f"K must be >= 2, got {K}")
    if d < K:
        raise DimensionError(f"need d >= K for a column-orthogonal Q, got d={d}, K={K}")
    rng = np.random.default_rng(seed)
    return etf_from_basis(orthonormal_columns(d, K, rng))


def nc_solution(shape: ProblemShape, radius: float, seed: int | None = None) -> ParameterPoint:
    """Exact collapse point on the sphere ``||W||^2 + ||H||^2 = radius^2`` with ``||W|| = ||H||``.

    Every feature of class ``k`` equals ``c m_k`` and ``w_k = sqrt(n) c m_k``,
    where ``m_k`` are the unit ETF columns.
    """
    if radius <= 0:
        raise InvalidInputError(f"radius must be positive, got {radius}")
    frame = make_etf(shape.K, shape.d, seed)
    c = radius / math.sqrt(2.0 * shape.n * shape.K)
    H = c * np.repeat(frame.M, shape.n, axis=1)
    W = math.sqrt(shape.n) * c * frame.M.T
    return ParameterPoint(W, H)


@dataclass(frozen=True)
class NcMetrics:
    """Collapse diagnostics; ``nan`` marks a saturated (zero-denominator) metric."""

    norm_variation_h: float
    norm_variation_w: float
    within_class_variation: float
    cos_h: float
    cos_w: float
    self_duality: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)

    def values(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)])

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def _ratio(num: float, den: float) -> float:
    if not math.isfinite(den) or den < DENOM_FLOOR:
        return math.nan
    return num / den


def _norm_variation(norms: np.ndarray) -> float:
    return _ratio(float(np.std(norms)), float(np.mean(norms)))


def _cosine_deviation(vectors: np.ndarray, K: int) -> float:
    """Avg over ``k < k'`` of ``|cos(v_k, v_k') + 1/(K-1)|``; rows of ``vectors``."""
    norms = np.linalg.norm(vectors, axis=1)
    if np.min(norms) < DENOM_FLOOR:
        return math.nan
    unit = vectors / norms[:, None]
    cos = unit @ unit.T
    iu = np.triu_indices(K, k=1)
    return float(np.mean(np.abs(cos[iu] + 1.0 / (K - 1))))


def nc_metrics(p: ParameterPoint, center_classifiers: bool = False) -> NcMetrics:
    """Six scale-free collapse metrics computed from class means of ``H`` and rows of ``W``.

    Features are centred by the global mean. Classifier rows are used as-is
    unless ``center_classifiers`` subtracts their row mean.
    """
    shape = p.shape
    K, n, d = shape.K, shape.n, shape.d
    feats = p.H.T.reshape(K, n, d)
    class_means = feats.mean(axis=1)
    global_mean = class_means.mean(axis=0)
    centred_means = class_means - global_mean
    W = p.W - p.W.mean(axis=0) if center_classifiers else p.W

    mean_norms = np.linalg.norm(centred_means, axis=1)
    w_norms = np.linalg.norm(W, axis=1)

    within = np.linalg.norm(feats - class_means[:, None, :], axis=-1)
    total = np.linalg.norm(feats - global_mean, axis=-1)
    within_var = _ratio(float(within.mean()), float(total.mean()))

    if np.min(mean_norms) < DENOM_FLOOR or np.min(w_norms) < DENOM_FLOOR:
        self_dual = math.nan
    else:
        diff = centred_means / mean_norms[:, None] - W / w_norms[:, None]
        self_dual = float(np.mean(np.linalg.norm(diff, axis=1)))

    return NcMetrics(
        norm_variation_h=_norm_variation(mean_norms),
        norm_variation_w=_norm_variation(w_norms),
        within_class_variation=within_var,
        cos_h=_cosine_deviation(centred_means, K),
        cos_w=_cosine_deviation(W, K),
        self_duality=self_dual,
    )
