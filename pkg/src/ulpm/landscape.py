"""Second-order probes on the sphere ``||W||^2 + ||H||^2 = const``.

At a radial point (``-grad L = lambda theta``) first-order moves along the
sphere are flat. If ``|lambda|`` is below the spectral norm of ``G = dL/dZ``
and some unit ``a`` satisfies ``W a = 0`` and ``H^T a = 0``, the direction
``(u a^T, -a v^T)`` built from the top singular pair ``(u, v)`` of ``G``
leaves ``Z = W H`` unchanged to first order and has negative curvature on
the sphere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import FlowConfig, run_flow
from .geometry import nc_metrics
from .model import (
    InvalidInputError,
    ParameterPoint,
    gradient,
    gradient_point,
    loss,
    margins,
    softmax_residual,
)
from . import certify

DEFAULT_DELTAS = tuple(10.0 ** -k for k in range(1, 7))
NULL_ACCEPT = 1e-8


@dataclass(frozen=True)
class RadialResult:
    is_radial: bool
    lambda_hat: float
    residual: float


def radial_test(p: ParameterPoint, tol: float = 1e-8) -> RadialResult:
    """Least-squares fit ``-grad L ~ lambda theta``; radial iff relative residual <= ``tol``."""
    rho_sq = p.rho_sq
    if rho_sq == 0.0:
        raise InvalidInputError("radial test needs a nonzero parameter point")
    g = gradient_point(p)
    lam = -p.inner(g) / rho_sq
    gnorm = math.sqrt(g.rho_sq)
    if gnorm == 0.0:
        return RadialResult(True, 0.0, 0.0)
    rW = -g.W - lam * p.W
    rH = -g.H - lam * p.H
    resid = math.sqrt(float(np.sum(rW**2) + np.sum(rH**2))) / gnorm
    return RadialResult(resid <= tol, lam, resid)


def sphere_project(p: ParameterPoint, radius: float) -> ParameterPoint:
    return p.scaled(radius / p.rho)


def tangent_component(p: ParameterPoint, d: ParameterPoint) -> ParameterPoint:
    """Remove the radial part of ``d`` so that ``<theta, d> = 0``."""
    c = p.inner(d) / p.rho_sq
    return ParameterPoint(d.W - c * p.W, d.H - c * p.H)


def _unit(d: ParameterPoint) -> ParameterPoint:
    return d.scaled(1.0 / math.sqrt(d.rho_sq))


def sphere_curvature(p: ParameterPoint, d: ParameterPoint, h: float = 1e-4) -> float:
    """Central second difference of ``t -> L(retract(p + t d))`` at 0.

    The retraction rescales back to the starting radius; it agrees with the
    great circle through ``d`` to second order.
    """
    r = p.rho
    f = lambda t: loss(sphere_project(p + d.scaled(t), r))  # noqa: E731
    return (f(h) - 2.0 * f(0.0) + f(-h)) / h**2


def line_curvature(p: ParameterPoint, d: ParameterPoint, h: float = 1e-4) -> float:
    """Central second difference of ``t -> L(p + t d)`` at 0 (ambient Hessian quadratic form)."""
    f = lambda t: loss(p + d.scaled(t))  # noqa: E731
    return (f(h) - 2.0 * f(0.0) + f(-h)) / h**2


def null_direction(p: ParameterPoint) -> tuple[np.ndarray | None, float]:
    """Unit ``a`` with ``W a ~ 0`` and ``H^T a ~ 0``, plus the relative singular value found."""
    S = np.vstack([p.W, p.H.T])
    _, sv, Vt = np.linalg.svd(S, full_matrices=True)
    d = S.shape[1]
    smallest = sv[-1] if len(sv) == d else 0.0
    largest = sv[0] if len(sv) else 0.0
    rel = smallest / largest if largest > 0 else 0.0
    if rel > NULL_ACCEPT:
        return None, rel
    return Vt[-1], rel


@dataclass
class EscapeProbeResult:
    """``status`` is one of ``second_order``, ``first_order``, ``no_escape``, ``not_applicable``.

    ``curvature`` is measured on the sphere; ``line_curvature`` along the
    straight line. ``loss_drop`` compares the start with sphere-projected
    probes ``p + delta * escape_dir``.
    """

    status: str
    is_radial: bool
    lambda_hat: float
    spectral_norm: float
    escape_dir: ParameterPoint | None = None
    curvature: float = math.nan
    line_curvature: float = math.nan
    loss_drop: float = math.nan
    best_delta: float = math.nan
    probe_drops: dict[float, float] = field(default_factory=dict)
    diagnostic: str = ""

    @property
    def escape_found(self) -> bool:
        return self.status in ("first_order", "second_order") and self.loss_drop > 0


def _probe(p: ParameterPoint, d: ParameterPoint, deltas) -> tuple[float, float, dict]:
    r = p.rho
    base = loss(p)
    drops = {float(dl): base - loss(sphere_project(p + d.scaled(dl), r)) for dl in deltas}
    best = max(drops, key=drops.get)
    return drops[best], best, drops


def escape_direction(
    p: ParameterPoint, tol: float = 1e-8, deltas=DEFAULT_DELTAS
) -> EscapeProbeResult:
    radial = radial_test(p, tol)
    G = softmax_residual(p)
    sigma = float(np.linalg.norm(G, 2))
    res = EscapeProbeResult(
        status="", is_radial=radial.is_radial, lambda_hat=radial.lambda_hat, spectral_norm=sigma
    )

    if not radial.is_radial:
        g = gradient_point(p)
        d = tangent_component(p, g.scaled(-1.0))
        res.status = "first_order"
        res.diagnostic = "gradient not radial; using tangent-projected negative gradient"
    elif abs(radial.lambda_hat) >= sigma - tol * max(1.0, sigma):
        res.status = "no_escape"
        res.diagnostic = "|lambda| attains the spectral norm of dL/dZ: candidate global direction"
        return res
    else:
        a, rel = null_direction(p)
        if a is None:
            res.status = "not_applicable"
            res.diagnostic = (
                f"no common null vector of W and H^T (relative singular value {rel:.3g}); "
                "need d > rank([W; H^T])"
            )
            return res
        U, _, Vt = np.linalg.svd(G)
        u, v = U[:, 0], Vt[0]
        d = ParameterPoint(np.outer(u, a), -np.outer(a, v))
        # a is only null to tolerance; restore exact tangency
        d = tangent_component(p, d)
        res.status = "second_order"
        res.diagnostic = "radial point below spectral bound; singular-vector escape"

    d = _unit(d)
    res.escape_dir = d
    res.curvature = sphere_curvature(p, d)
    res.line_curvature = line_curvature(p, d)
    res.loss_drop, res.best_delta, res.probe_drops = _probe(p, d, deltas)
    return res


def balance_residual(p: ParameterPoint) -> float:
    """``||W^T W - H H^T||_F / max(1, ||W^T W||_F)``."""
    WtW = p.W.T @ p.W
    return float(np.linalg.norm(WtW - p.H @ p.H.T) / max(1.0, np.linalg.norm(WtW)))


def nuclear_norm_gap(p: ParameterPoint) -> float:
    """``(||W||^2 + ||H||^2) / 2 - ||W H||_*``, nonnegative for every factorization."""
    return 0.5 * p.rho_sq - float(np.linalg.norm(p.W @ p.H, "nuc"))


# --- the K = 4, n = 1 saddle example ---------------------------------------

EXAMPLE_BLOCK = np.array(
    [[1.0, -1.0, 0.0, 0.0], [-1.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, -1.0], [0.0, 0.0, -1.0, 1.0]]
)
EXAMPLE_LAMBDA = 0.5 * np.array(
    [[0.0, 0.0, 1.0, 1.0], [0.0, 0.0, 1.0, 1.0], [1.0, 1.0, 0.0, 0.0], [1.0, 1.0, 0.0, 0.0]]
)


def example_point() -> ParameterPoint:
    return ParameterPoint(EXAMPLE_BLOCK.copy(), EXAMPLE_BLOCK.copy())


def example_family(alpha: float) -> ParameterPoint:
    """Norm-preserving perturbation of the example; ``alpha = 0`` is the saddle, ``1/2`` a collapse point."""
    a = alpha
    W = np.array(
        [
            [1 + a, -1 + a, a, a],
            [-1 + a, 1 + a, a, a],
            [-a, -a, 1 - a, -1 - a],
            [-a, -a, -1 - a, 1 - a],
        ]
    ) / math.sqrt(1 + 2 * a * a)
    return ParameterPoint(W, W.T.copy())


def example_inner(alpha: float) -> float:
    """Closed form ``exp(2(2a^2-1)/(1+2a^2)) + 2 exp(-4a^2/(1+2a^2))``."""
    q = 1 + 2 * alpha * alpha
    return math.exp(2 * (2 * alpha * alpha - 1) / q) + 2 * math.exp(-4 * alpha * alpha / q)


def example_inner_from_loss(alpha: float) -> float:
    """Recover the same function from the loss of the family: ``L = 4 log(1 + f e^-2)``."""
    return math.e**2 * math.expm1(loss(example_family(alpha)) / 4.0)


def _second_difference(f, h: float) -> float:
    return (f(h) - 2.0 * f(0.0) + f(-h)) / h**2


def _direction_drift(p0: ParameterPoint, p1: ParameterPoint) -> float:
    u0, u1 = p0.scaled(1 / p0.rho), p1.scaled(1 / p1.rho)
    return math.sqrt(u1.rho_sq + u0.rho_sq - 2.0 * u0.inner(u1))


def example_3_1_scenario(
    stuck_steps: int = 1_000,
    perturbed_steps: int = 100_000,
    step_size: float = 1.0,
    perturb_alpha: float = 0.1,
    fd_step: float = 1e-3,
) -> dict:
    """Run every check on the K = 4 example and return a JSON-ready report."""
    p = example_point()
    e2 = math.exp(-2.0)
    gW, gH = gradient(p)
    coeff_from_gradient = float(np.vdot(gW, p.W) / np.vdot(p.W, p.W))
    printed_coeff = -(2 + 2 * e2) / (2 + 2 * e2 + 2 * math.e**2)
    exact_coeff = -(2 + 2 * e2) / (2 + e2 + math.e**2)

    scaled = p.scaled(1 / math.sqrt(2))
    eps, delta, delta_sum = certify.kkt_residuals(scaled, certify.lambdas_from_matrix(EXAMPLE_LAMBDA))
    rep = margins(scaled)
    binding = int(np.sum(np.isclose(rep.s[np.isfinite(rep.s)], 1.0, rtol=0, atol=1e-12)))

    radial = radial_test(p)
    probe = escape_direction(p)

    f2_loss = _second_difference(example_inner_from_loss, fd_step)
    f2_closed = _second_difference(example_inner, fd_step)
    f1_loss = (example_inner_from_loss(fd_step) - example_inner_from_loss(-fd_step)) / (2 * fd_step)
    alphas = np.linspace(-0.2, 0.2, 41)
    family_losses = [loss(example_family(a)) for a in alphas]

    cfg_stuck = FlowConfig(
        step_size=step_size, max_steps=stuck_steps, reduction="sum", certify=False
    )
    stuck_end, _ = run_flow(p, cfg_stuck)
    stuck_drift = _direction_drift(p, stuck_end)

    start = example_family(perturb_alpha)
    cfg_pert = FlowConfig(
        step_size=step_size, max_steps=perturbed_steps, reduction="sum", certify=False
    )
    pert_end, pert_rec = run_flow(start, cfg_pert)
    pert_final = nc_metrics(pert_end).as_dict()

    return {
        "loss": loss(p),
        "loss_expected": 4 * math.log1p(math.exp(-4) + 2 * e2),
        "gradient_coefficient": coeff_from_gradient,
        "gradient_coefficient_printed": printed_coeff,
        "gradient_coefficient_exact": exact_coeff,
        "gradients_equal": bool(np.allclose(gW, gH, rtol=0, atol=1e-15)),
        "q_min": margins(p).q_min,
        "kkt_eps_printed_lambda": eps,
        "kkt_delta_printed_lambda": delta,
        "kkt_delta_sum_printed_lambda": delta_sum,
        "scaled_min_gap": rep.q_min,
        "scaled_binding_constraints": binding,
        "radial": radial.is_radial,
        "lambda_hat": radial.lambda_hat,
        "radial_residual": radial.residual,
        "spectral_norm": probe.spectral_norm,
        "escape_status": probe.status,
        "escape_curvature": probe.curvature,
        "escape_line_curvature": probe.line_curvature,
        "escape_loss_drop": probe.loss_drop,
        "escape_best_delta": probe.best_delta,
        "f_first_deriv_at_zero": f1_loss,
        "f_second_deriv_at_zero": f2_loss,
        "f_second_deriv_closed_form_fd": f2_closed,
        "f_second_deriv_expected": 16 * (math.exp(-2) - 1),
        "family_alpha": alphas.tolist(),
        "family_loss": family_losses,
        "family_half_metrics": nc_metrics(example_family(0.5)).as_dict(),
        "stuck_steps": stuck_steps,
        "stuck_direction_drift": stuck_drift,
        "perturbed_alpha": perturb_alpha,
        "perturbed_steps": perturbed_steps,
        "perturbed_initial_metrics": nc_metrics(start).as_dict(),
        "perturbed_final_metrics": pert_final,
        "perturbed_final_max_metric": max(pert_final.values()),
        "perturbed_status": pert_rec.status,
        "step_size": step_size,
    }
