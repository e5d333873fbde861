"""Discretized gradient flow on the ULPM objective with trajectory diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np
from scipy import stats

from . import certify
from .geometry import NcMetrics, nc_metrics
from .model import (
    InvalidInputError,
    ParameterPoint,
    ProblemShape,
    loss_and_gradient,
    margins,
    smoothed_margin,
)

LOG2 = math.log(2.0)
INTEGRATORS = ("euler", "rk4")
REDUCTIONS = ("sum", "mean")


def geometric_schedule(max_steps: int, ratio: float = 1.2) -> list[int]:
    """Step 0, then ``round(ratio**m)`` deduplicated, always ending at ``max_steps``."""
    if ratio <= 1.0:
        raise InvalidInputError(f"checkpoint ratio must exceed 1, got {ratio}")
    steps = {0, max_steps}
    x = 1.0
    while x <= max_steps:
        steps.add(int(round(x)))
        x *= ratio
    return sorted(s for s in steps if s <= max_steps)


@dataclass
class FlowConfig:
    """Gradient-descent settings.

    ``reduction="mean"`` steps on ``L / (nK)``, the usual framework default, so
    a learning rate quoted for averaged losses can be reused. ``"sum"`` steps
    on ``L`` itself. Every recorded diagnostic uses the summed loss.
    """

    step_size: float = 0.1
    max_steps: int = 10_000
    checkpoint_schedule: list[int] | None = None
    checkpoint_ratio: float = 1.2
    seed: int = 0
    init_scale: float = 1.0
    integrator: str = "euler"
    reduction: str = "mean"
    certify: bool = True

    def __post_init__(self):
        if not self.step_size > 0:
            raise InvalidInputError(f"step_size must be positive, got {self.step_size}")
        if self.max_steps < 0:
            raise InvalidInputError(f"max_steps must be >= 0, got {self.max_steps}")
        if not self.init_scale > 0:
            raise InvalidInputError(f"init_scale must be positive, got {self.init_scale}")
        if self.integrator not in INTEGRATORS:
            raise InvalidInputError(f"integrator must be one of {INTEGRATORS}")
        if self.reduction not in REDUCTIONS:
            raise InvalidInputError(f"reduction must be one of {REDUCTIONS}")
        if self.checkpoint_schedule is None:
            self.checkpoint_schedule = geometric_schedule(self.max_steps, self.checkpoint_ratio)
        sched = list(self.checkpoint_schedule)
        if any(b <= a for a, b in zip(sched, sched[1:])):
            raise InvalidInputError("checkpoint_schedule must be strictly increasing")
        if sched and (sched[0] < 0 or sched[-1] > self.max_steps):
            raise InvalidInputError("checkpoint_schedule must lie within [0, max_steps]")
        self.checkpoint_schedule = sched


@dataclass
class Checkpoint:
    step: int
    loss: float
    rho_sq: float
    gamma_tilde: float
    beta: float
    q_min: float
    separated: bool
    nc: NcMetrics
    kkt_eps: float = math.nan
    kkt_delta: float = math.nan
    kkt_delta_sum: float = math.nan
    eps_bound: float = math.nan
    delta_bound: float = math.nan


@dataclass
class TrajectoryRecord:
    checkpoints: list[Checkpoint] = field(default_factory=list)
    status: str = "completed"
    warnings: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.checkpoints)

    def column(self, name: str) -> np.ndarray:
        """Values of one scalar field (or an ``NcMetrics`` field) across checkpoints."""
        if name in NcMetrics.names():
            return np.array([getattr(c.nc, name) for c in self.checkpoints], dtype=float)
        return np.array([getattr(c, name) for c in self.checkpoints], dtype=float)

    def separated(self) -> "TrajectoryRecord":
        return TrajectoryRecord(
            [c for c in self.checkpoints if c.separated], self.status, list(self.warnings)
        )

    @property
    def diverged(self) -> bool:
        return self.status == "diverged"


def init_point(shape: ProblemShape, init_scale: float, seed: int | None) -> ParameterPoint:
    """I.i.d. Gaussian ``W`` and ``H`` with standard deviation ``init_scale / sqrt(d)``."""
    if not init_scale > 0:
        raise InvalidInputError(f"init_scale must be positive, got {init_scale}")
    rng = np.random.default_rng(seed)
    std = init_scale / math.sqrt(shape.d)
    W = rng.standard_normal((shape.K, shape.d)) * std
    H = rng.standard_normal((shape.d, shape.num_samples)) * std
    return ParameterPoint(W, H)


def velocity_cosine(W, H, gW, gH) -> float:
    """Cosine between ``theta`` and ``-grad``; nan if either norm underflows."""
    gnorm = math.sqrt(float(np.sum(gW**2) + np.sum(gH**2)))
    tnorm = math.sqrt(float(np.sum(W**2) + np.sum(H**2)))
    if gnorm < 1e-300 or tnorm < 1e-300:
        return math.nan
    return -float(np.vdot(W, gW) + np.vdot(H, gH)) / (gnorm * tnorm)


def _checkpoint(step, W, H, L, gW, gH, with_certificate: bool) -> Checkpoint:
    p = ParameterPoint(W, H)
    rho_sq = p.rho_sq
    q_min = margins(p).q_min
    separated = L < LOG2
    cp = Checkpoint(
        step=step,
        loss=L,
        rho_sq=rho_sq,
        gamma_tilde=smoothed_margin(L, rho_sq),
        beta=velocity_cosine(W, H, gW, gH),
        q_min=q_min,
        separated=separated,
        nc=nc_metrics(p),
    )
    if with_certificate and separated and q_min > 0:
        cert = certify.certificate(p)
        cp.kkt_eps = cert.eps
        cp.kkt_delta = cert.delta
        cp.kkt_delta_sum = cert.delta_sum
        cp.eps_bound = cert.eps_bound
        cp.delta_bound = cert.delta_bound
    return cp


def _rk4_step(W, H, h, K, n, scale):
    def f(W_, H_):
        L_, gW_, gH_ = loss_and_gradient(W_, H_, K, n)
        return L_, -scale * gW_, -scale * gH_

    _, k1W, k1H = f(W, H)
    _, k2W, k2H = f(W + 0.5 * h * k1W, H + 0.5 * h * k1H)
    _, k3W, k3H = f(W + 0.5 * h * k2W, H + 0.5 * h * k2H)
    _, k4W, k4H = f(W + h * k3W, H + h * k3H)
    W = W + (h / 6.0) * (k1W + 2 * k2W + 2 * k3W + k4W)
    H = H + (h / 6.0) * (k1H + 2 * k2H + 2 * k3H + k4H)
    return W, H


def run_flow(p0: ParameterPoint, cfg: FlowConfig) -> tuple[ParameterPoint, TrajectoryRecord]:
    """Integrate ``d(W, H)/dt = -grad L`` and record diagnostics at each checkpoint.

    A non-finite loss stops the run with ``status="diverged"``; the returned
    point is then the last finite iterate.
    """
    shape = p0.shape
    K, n = shape.K, shape.n
    scale = 1.0 / shape.num_samples if cfg.reduction == "mean" else 1.0
    h = cfg.step_size
    wanted = set(cfg.checkpoint_schedule)
    rec = TrajectoryRecord()
    rec.warnings.extend(shape.warnings)

    W, H = p0.W.copy(), p0.H.copy()
    last_good = (W, H)
    prev_loss = math.inf
    was_separated = False
    loss_increase_warned = separation_warned = False

    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(cfg.max_steps + 1):
            L, gW, gH = loss_and_gradient(W, H, K, n)
            if not (math.isfinite(L) and np.all(np.isfinite(gW)) and np.all(np.isfinite(gH))):
                rec.status = "diverged"
                rec.warnings.append(f"non-finite loss at step {step}; run aborted")
                break
            last_good = (W, H)
            if L > prev_loss and not loss_increase_warned:
                rec.warnings.append(
                    f"loss increased at step {step} ({prev_loss:.6g} -> {L:.6g}); step size may be too large"
                )
                loss_increase_warned = True
            if was_separated and L >= LOG2 and not separation_warned:
                rec.warnings.append(f"separation lost at step {step}; step size may be too large")
                separation_warned = True
            was_separated = was_separated or L < LOG2
            prev_loss = L

            if step in wanted:
                rec.checkpoints.append(_checkpoint(step, W, H, L, gW, gH, cfg.certify))
            if step == cfg.max_steps:
                break
            if cfg.integrator == "euler":
                W = W - (h * scale) * gW
                H = H - (h * scale) * gH
            else:
                W, H = _rk4_step(W, H, h, K, n, scale)

    return ParameterPoint(*last_good), rec


def run_from_config(shape: ProblemShape, cfg: FlowConfig):
    return run_flow(init_point(shape, cfg.init_scale, cfg.seed), cfg)


def fit_loss_rate(
    rec: TrajectoryRecord, min_step: int | None = None, final_decade: bool = False
) -> tuple[float, float]:
    """Least-squares line through ``(t, 1/L)`` over separated checkpoints.

    ``final_decade`` restricts the fit to steps at or above one tenth of the
    last recorded step. Returns ``(slope, r_squared)``.
    """
    sep = rec.separated().checkpoints
    if final_decade and sep:
        min_step = max(min_step or 0, sep[-1].step // 10)
    if min_step is not None:
        sep = [c for c in sep if c.step >= min_step]
    if len(sep) < 10:
        raise InvalidInputError(
            f"need at least 10 separated checkpoints to fit a loss rate, got {len(sep)}"
        )
    t = np.array([c.step for c in sep], dtype=float)
    y = 1.0 / np.array([c.loss for c in sep], dtype=float)
    if not np.all(np.isfinite(y)) or np.ptp(y) == 0.0:
        raise InvalidInputError("1/L is constant over the fit window; r_squared undefined")
    fit = stats.linregress(t, y)
    return float(fit.slope), float(fit.rvalue**2)


CHECKPOINT_FIELDS = [f.name for f in fields(Checkpoint)]
