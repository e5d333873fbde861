"""Command-line experiment harness.

Exit codes: 0 success, 1 usage error, 2 numerical divergence, 3 internal
invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import certify, landscape
from .dynamics import FlowConfig, TrajectoryRecord, fit_loss_rate, init_point, run_flow
from .geometry import nc_metrics, nc_solution
from .model import (
    InvalidInputError,
    ParameterPoint,
    ProblemShape,
    gradient,
    loss,
    margin_upper_bound,
    margins,
    softmax_residual,
)

log = logging.getLogger("ulpm")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_INVARIANT = 0, 1, 2, 3
KINDS = ("flow", "example31", "nc-verify", "sphere-compare", "certify-sweep")
FORMATS = ("csv", "json")
SCHEMA_LINE = "# ulpm-schema v1"
CSV_COLUMNS = [
    "step", "loss", "rho_sq", "gamma_tilde", "beta", "q_min",
    "eps_direct", "delta_direct", "eps_bound", "delta_bound",
    "norm_var_h", "norm_var_w", "within_var", "cos_h", "cos_w", "self_dual",
]  # fmt: skip
_CHECKPOINT_ATTR = {
    "eps_direct": "kkt_eps",
    "delta_direct": "kkt_delta",
    "norm_var_h": "norm_variation_h",
    "norm_var_w": "norm_variation_w",
    "within_var": "within_class_variation",
    "self_dual": "self_duality",
}
Q_BOUND_TOL = 1e-12
CERT_TOL = 1e-8
NC_BOUND_TOL = 1e-9


class UsageError(Exception):
    pass


CONFIG_KEYS: dict[str, type] = {
    "classes": int,
    "per_class": int,
    "dim": int,
    "lr": float,
    "steps": int,
    "seed": int,
    "init_scale": float,
    "integrator": str,
    "reduction": str,
    "checkpoint_ratio": float,
    "radius": float,
    "samples": int,
    "alpha": float,
    "out": str,
    "format": str,
}
BASE_DEFAULTS = {
    "per_class": 1,
    "dim": 2,
    "lr": 0.1,
    "steps": 10_000,
    "seed": 0,
    "init_scale": 1.0,
    "integrator": "euler",
    "reduction": "mean",
    "checkpoint_ratio": 1.2,
    "radius": 4.0,
    "samples": 10_000,
    "alpha": 0.1,
    "format": "csv,json",
}
KIND_DEFAULTS = {
    "example31": {"lr": 1.0, "steps": 100_000},
}
NEEDS_SHAPE = {"flow", "nc-verify", "sphere-compare", "certify-sweep"}


@dataclass
class ExperimentConfig:
    kind: str
    values: dict = field(default_factory=dict)

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    @property
    def out_dir(self) -> Path:
        return Path(self.values["out"])

    @property
    def formats(self) -> set[str]:
        return set(self.values["format"])

    def shape(self) -> ProblemShape:
        return ProblemShape(K=self.classes, n=self.per_class, d=self.dim)

    def flow_config(self) -> FlowConfig:
        return FlowConfig(
            step_size=self.lr,
            max_steps=self.steps,
            checkpoint_ratio=self.checkpoint_ratio,
            seed=self.seed,
            init_scale=self.init_scale,
            integrator=self.integrator,
            reduction=self.reduction,
        )

    def resolved(self) -> dict:
        v = dict(self.values)
        v["format"] = sorted(v["format"])
        return {"kind": self.kind, **v}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common_flags(parser: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    parser.add_argument("--out", default=S, help="output directory")
    parser.add_argument("--seed", type=str, default=S, help="RNG seed")
    parser.add_argument("--format", default=S, help="comma-separated subset of csv,json")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ulpm", description="Gradient-flow experiments on the ULPM objective.")
    _common_flags(parser)
    sub = parser.add_subparsers(dest="kind", metavar="KIND", parser_class=_Parser)
    S = argparse.SUPPRESS
    helps = {
        "flow": "gradient descent run with trajectory CSV",
        "example31": "K=4 saddle example report",
        "nc-verify": "check an exact collapse point",
        "sphere-compare": "collapse point vs random points on the same sphere",
        "certify-sweep": "KKT residuals along a run",
    }
    for kind in KINDS:
        sp = sub.add_parser(kind, help=helps[kind])
        _common_flags(sp)
        sp.add_argument("--config", default=S, help="key = value file; flags take precedence")
        sp.add_argument("--classes", type=str, default=S, help="K")
        sp.add_argument("--per-class", dest="per_class", type=str, default=S, help="n")
        sp.add_argument("--dim", type=str, default=S, help="d")
        sp.add_argument("--lr", type=str, default=S, help="step size")
        sp.add_argument("--steps", type=str, default=S)
        sp.add_argument("--init-scale", dest="init_scale", type=str, default=S)
        sp.add_argument("--integrator", choices=("euler", "rk4"), default=S)
        sp.add_argument("--reduction", choices=("sum", "mean"), default=S)
        sp.add_argument("--checkpoint-ratio", dest="checkpoint_ratio", type=str, default=S)
        sp.add_argument("--radius", type=str, default=S)
        sp.add_argument("--samples", type=str, default=S)
        sp.add_argument("--alpha", type=str, default=S, help="example31 perturbation")
    return parser


def read_config_file(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values: dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in CONFIG_KEYS:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = value
    return values


def _convert(key: str, raw) -> object:
    typ = CONFIG_KEYS[key]
    if key == "format":
        items = [x.strip() for x in str(raw).split(",") if x.strip()] if isinstance(raw, str) else list(raw)
        bad = [x for x in items if x not in FORMATS]
        if bad or not items:
            raise UsageError(f"--format must be a non-empty subset of {FORMATS}, got {raw!r}")
        return items
    if not isinstance(raw, str):
        return raw
    try:
        if typ is int:
            x = float(raw)
            if not x.is_integer():
                raise ValueError
            return int(x)
        if typ is float:
            return float(raw)
    except ValueError:
        raise UsageError(f"cannot parse {key} = {raw!r} as {typ.__name__}") from None
    return raw


def parse_config(argv: list[str] | None = None) -> ExperimentConfig:
    ns = vars(build_parser().parse_args(argv))
    kind = ns.pop("kind", None)
    if kind is None:
        raise UsageError(f"missing experiment kind; choose one of {', '.join(KINDS)}")
    file_values = read_config_file(ns.pop("config")) if "config" in ns else {}

    raw = {**BASE_DEFAULTS, **KIND_DEFAULTS.get(kind, {}), "out": f"runs/{kind}"}
    raw.update(file_values)
    raw.update(ns)
    if kind in NEEDS_SHAPE and "classes" not in raw:
        raise UsageError(f"{kind} requires --classes")
    values = {k: _convert(k, v) for k, v in raw.items()}

    if "classes" in values and values["classes"] < 2:
        raise UsageError(f"--classes must satisfy K >= 2, got {values['classes']}")
    for key in ("per_class", "dim"):
        if values[key] < 1:
            raise UsageError(f"--{key.replace('_', '-')} must be >= 1, got {values[key]}")
    for key in ("lr", "init_scale", "radius", "checkpoint_ratio"):
        if not (math.isfinite(values[key]) and values[key] > 0):
            raise UsageError(f"{key} must be positive and finite, got {values[key]}")
    if values["checkpoint_ratio"] <= 1:
        raise UsageError("checkpoint_ratio must exceed 1")
    if values["steps"] < 0 or values["samples"] < 1:
        raise UsageError("steps must be >= 0 and samples >= 1")
    if values["integrator"] not in ("euler", "rk4") or values["reduction"] not in ("sum", "mean"):
        raise UsageError("integrator must be euler|rk4 and reduction sum|mean")
    return ExperimentConfig(kind=kind, values=values)


# --- serialization ---------------------------------------------------------


def fmt_number(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return "%.17g" % x if math.isfinite(x) else "nan"


def checkpoint_row(cp) -> list[str]:
    row = []
    for col in CSV_COLUMNS:
        attr = _CHECKPOINT_ATTR.get(col, col)
        value = getattr(cp.nc, attr) if hasattr(cp.nc, attr) else getattr(cp, attr)
        row.append(fmt_number(value))
    return row


def write_rows(path: Path, header: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(SCHEMA_LINE + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow(r)


def write_trajectory_csv(path: Path, rec: TrajectoryRecord) -> None:
    write_rows(path, CSV_COLUMNS, (checkpoint_row(cp) for cp in rec.checkpoints))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def write_json(path: Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(payload), fh, indent=2, sort_keys=False)
        fh.write("\n")


# --- experiment kinds ------------------------------------------------------


def _trajectory_checks(rec: TrajectoryRecord, shape: ProblemShape) -> list[str]:
    problems = []
    for cp in rec.checkpoints:
        bound = cp.rho_sq / (2.0 * (shape.K - 1) * math.sqrt(shape.n))
        if cp.q_min > bound + Q_BOUND_TOL:
            problems.append(f"step {cp.step}: q_min {cp.q_min:.17g} exceeds bound {bound:.17g}")
        if math.isfinite(cp.eps_bound) and cp.kkt_eps > cp.eps_bound + CERT_TOL:
            problems.append(f"step {cp.step}: eps {cp.kkt_eps:.6g} > bound {cp.eps_bound:.6g}")
        if math.isfinite(cp.delta_bound) and cp.kkt_delta > cp.delta_bound + CERT_TOL:
            problems.append(f"step {cp.step}: delta {cp.kkt_delta:.6g} > bound {cp.delta_bound:.6g}")
    return problems


def _flow_common(cfg: ExperimentConfig):
    shape = cfg.shape()
    for msg in shape.warnings:
        log.warning(msg)
    fcfg = cfg.flow_config()
    p0 = init_point(shape, fcfg.init_scale, fcfg.seed)
    p, rec = run_flow(p0, fcfg)
    for msg in rec.warnings:
        log.warning(msg)
    return shape, p, rec


def _flow_summary(cfg, shape, p, rec) -> dict:
    sep = rec.separated().checkpoints
    last = rec.checkpoints[-1] if rec.checkpoints else None
    try:
        slope, r2 = fit_loss_rate(rec, final_decade=True)
    except InvalidInputError as exc:
        slope = r2 = math.nan
        log.info("loss-rate fit skipped: %s", exc)
    return {
        "config": cfg.resolved(),
        "status": rec.status,
        "warnings": rec.warnings,
        "num_checkpoints": len(rec),
        "first_separated_step": sep[0].step if sep else None,
        "final": {c: float(v) for c, v in zip(CSV_COLUMNS, map(float, checkpoint_row(last)))}
        if last
        else None,
        "final_point_loss": loss(p),
        "margin_bound": margin_upper_bound(p),
        "loss_rate_slope": slope,
        "loss_rate_r_squared": r2,
    }


def run_flow_kind(cfg: ExperimentConfig) -> int:
    shape, p, rec = _flow_common(cfg)
    out = cfg.out_dir
    if "csv" in cfg.formats:
        write_trajectory_csv(out / "trajectory.csv", rec)
    problems = _trajectory_checks(rec, shape)
    if "json" in cfg.formats:
        # the last finite iterate of a diverged run can still overflow when squared
        with np.errstate(over="ignore", invalid="ignore"):
            summary = _flow_summary(cfg, shape, p, rec)
        summary["invariant_violations"] = problems
        write_json(out / "summary.json", summary)
    return _finish(rec, problems)


def run_certify_sweep(cfg: ExperimentConfig) -> int:
    shape, p, rec = _flow_common(cfg)
    out = cfg.out_dir
    if "csv" in cfg.formats:
        write_trajectory_csv(out / "certify.csv", rec)
    problems = _trajectory_checks(rec, shape)
    if "json" in cfg.formats:
        sep = rec.separated()
        write_json(
            out / "certify.json",
            {
                "config": cfg.resolved(),
                "status": rec.status,
                "warnings": rec.warnings,
                "step": sep.column("step"),
                "eps_direct": sep.column("kkt_eps"),
                "delta_direct": sep.column("kkt_delta"),
                "delta_sum": sep.column("kkt_delta_sum"),
                "eps_bound": sep.column("eps_bound"),
                "delta_bound": sep.column("delta_bound"),
                "invariant_violations": problems,
            },
        )
    return _finish(rec, problems)


def _finish(rec: TrajectoryRecord, problems: list[str]) -> int:
    if rec.diverged:
        log.error("run diverged: %s", rec.warnings[-1])
        return EXIT_DIVERGED
    if problems:
        for msg in problems:
            log.error("invariant violated: %s", msg)
        return EXIT_INVARIANT
    return EXIT_OK


def run_example31(cfg: ExperimentConfig) -> int:
    report = landscape.example_3_1_scenario(
        perturbed_steps=cfg.steps, step_size=cfg.lr, perturb_alpha=cfg.alpha
    )
    report["config"] = cfg.resolved()
    out = cfg.out_dir
    if "json" in cfg.formats:
        write_json(out / "example31.json", report)
    if "csv" in cfg.formats:
        rows = (
            [fmt_number(a), fmt_number(L), fmt_number(landscape.example_inner(a))]
            for a, L in zip(report["family_alpha"], report["family_loss"])
        )
        write_rows(out / "example31_family.csv", ["alpha", "loss", "f"], rows)
    problems = []
    if not report["radial"]:
        problems.append("example point is not radial")
    if report["kkt_eps_printed_lambda"] > CERT_TOL:
        problems.append("printed multipliers do not certify the example point")
    if report["stuck_direction_drift"] > 1e-6:
        problems.append("plain descent drifted away from the example direction")
    for msg in problems:
        log.error("invariant violated: %s", msg)
    return EXIT_INVARIANT if problems else EXIT_OK


def nc_report(shape: ProblemShape, radius: float, seed: int) -> dict:
    p = nc_solution(shape, radius, seed)
    rep = margins(p)
    bound = margin_upper_bound(p)
    radial = landscape.radial_test(p)
    probe = landscape.escape_direction(p)
    cert = certify.certificate(p)
    G = softmax_residual(p)
    gW, gH = gradient(p)
    return {
        "shape": asdict(shape),
        "radius": radius,
        "rho_sq": p.rho_sq,
        "w_norm": float(np.linalg.norm(p.W)),
        "h_norm": float(np.linalg.norm(p.H)),
        "loss": loss(p),
        "q_min": rep.q_min,
        "margin_bound": bound,
        "bound_gap": abs(rep.q_min - bound),
        "nc_metrics": nc_metrics(p).as_dict(),
        "radial": radial.is_radial,
        "lambda_hat": radial.lambda_hat,
        "radial_residual": radial.residual,
        "spectral_norm": float(np.linalg.norm(G, 2)),
        "escape_status": probe.status,
        "balance_residual": landscape.balance_residual(p),
        "nuclear_norm_gap": landscape.nuclear_norm_gap(p),
        "softmax_column_sum_max": float(np.max(np.abs(G.sum(axis=0)))),
        "gradient_norm": math.sqrt(float(np.sum(gW**2) + np.sum(gH**2))),
        "kkt_eps": cert.eps,
        "kkt_delta": cert.delta,
        "kkt_delta_sum": cert.delta_sum,
        "mfcq": certify.mfcq_check(p).holds,
    }


def run_nc_verify(cfg: ExperimentConfig) -> int:
    rep = nc_report(cfg.shape(), cfg.radius, cfg.seed)
    problems = []
    if rep["bound_gap"] > NC_BOUND_TOL:
        problems.append(f"|q_min - bound| = {rep['bound_gap']:.3g} > {NC_BOUND_TOL:g}")
    if not rep["radial"]:
        problems.append("collapse point is not radial")
    if rep["escape_status"] != "no_escape":
        problems.append(f"escape probe returned {rep['escape_status']}")
    worst = max(rep["nc_metrics"].values())
    if not worst <= 1e-10:
        problems.append(f"collapse metrics not zero (max {worst:.3g})")
    rep["passed"] = not problems
    rep["violations"] = problems
    rep["config"] = cfg.resolved()
    out = cfg.out_dir
    if "json" in cfg.formats:
        write_json(out / "nc_verify.json", rep)
    if "csv" in cfg.formats:
        keys = [k for k, v in rep.items() if isinstance(v, (int, float)) and not isinstance(v, bool)]
        write_rows(out / "nc_verify.csv", ["quantity", "value"], ([k, fmt_number(rep[k])] for k in keys))
    for msg in problems:
        log.error("invariant violated: %s", msg)
    return EXIT_INVARIANT if problems else EXIT_OK


def random_sphere_point(shape: ProblemShape, radius: float, rng: np.random.Generator) -> ParameterPoint:
    W = rng.standard_normal((shape.K, shape.d))
    H = rng.standard_normal((shape.d, shape.num_samples))
    return ParameterPoint(W, H).scaled(radius / math.sqrt(np.sum(W**2) + np.sum(H**2)))


def rebalanced(p: ParameterPoint, ratio: float) -> ParameterPoint:
    """Same sphere, ``||W|| / ||H|| = ratio``; ``Z = W H`` keeps its direction."""
    r2 = p.rho_sq
    wn = math.sqrt(r2 * ratio**2 / (1 + ratio**2))
    hn = math.sqrt(r2 / (1 + ratio**2))
    return ParameterPoint(p.W * wn / np.linalg.norm(p.W), p.H * hn / np.linalg.norm(p.H))


def sphere_compare(shape: ProblemShape, radius: float, samples: int, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    nc = nc_solution(shape, radius, seed)
    nc_loss = loss(nc)
    rand_losses = np.array([loss(random_sphere_point(shape, radius, rng)) for _ in range(samples)])
    ratios = [0.5, 2.0]
    rescaled = {r: loss(rebalanced(nc, r)) for r in ratios}
    return {
        "nc_loss": nc_loss,
        "random_losses": rand_losses,
        "random_min": float(rand_losses.min()),
        "exceptions": int(np.sum(rand_losses <= nc_loss)),
        "rescaled_ratios": ratios,
        "rescaled_losses": [rescaled[r] for r in ratios],
        "rescaled_exceptions": int(sum(v <= nc_loss for v in rescaled.values())),
    }


def run_sphere_compare(cfg: ExperimentConfig) -> int:
    shape = cfg.shape()
    res = sphere_compare(shape, cfg.radius, cfg.samples, cfg.seed)
    out = cfg.out_dir
    if "csv" in cfg.formats:
        rows = [["nc", "0", "1", fmt_number(res["nc_loss"])]]
        rows += [["rescaled", str(i), fmt_number(r), fmt_number(L)]
                 for i, (r, L) in enumerate(zip(res["rescaled_ratios"], res["rescaled_losses"]))]  # fmt: skip
        rows += [["random", str(i), "nan", fmt_number(L)] for i, L in enumerate(res["random_losses"])]
        write_rows(out / "sphere_compare.csv", ["kind", "index", "norm_ratio", "loss"], rows)
    if "json" in cfg.formats:
        summary = {k: v for k, v in res.items() if k != "random_losses"}
        summary["config"] = cfg.resolved()
        write_json(out / "sphere_compare.json", summary)
    problems = []
    if res["exceptions"]:
        problems.append(f"{res['exceptions']} random points match or beat the collapse point")
    if res["rescaled_exceptions"]:
        problems.append("an unbalanced collapse point is not strictly worse")
    for msg in problems:
        log.error("invariant violated: %s", msg)
    return EXIT_INVARIANT if problems else EXIT_OK


RUNNERS = {
    "flow": run_flow_kind,
    "example31": run_example31,
    "nc-verify": run_nc_verify,
    "sphere-compare": run_sphere_compare,
    "certify-sweep": run_certify_sweep,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="ulpm: %(levelname)s: %(message)s", stream=sys.stderr)
    try:
        cfg = parse_config(argv)
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        return RUNNERS[cfg.kind](cfg)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"ulpm: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"ulpm: cannot write output: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvalidInputError as exc:
        print(f"ulpm: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # anything else is a bug, not user error
        log.exception("internal error: %s", exc)
        return EXIT_INVARIANT
