"""Self-check suites run by the ``check`` command.

Each suite returns ``(passed, metrics)``; the runner times it, turns
exceptions into failed suites and logs one line per suite. Sizes come from
the scale table, ``quick`` for development runs and ``acceptance`` for the
release gate.
"""

import math
import time
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np
from loguru import logger

from app.core.config import settings
from app.core.exceptions import BridgeError, UsageError
from app.core.logger import log_suite_result
from app.models.bridge import BridgeConfig
from app.models.estimates import CheckReport, SuiteResult
from app.services.estimators import heat_kernel_targets, series_kernel
from app.services.likelihood import l2_radial_bound, log_radon_nikodym_bm
from app.services.manifolds import get_manifold, parse_point
from app.services.sde_engine import sample_ensemble
from app.services.surfaces import integrate_jacobi
from app.utils.linalg import frame_coords, from_frame


SCALES: Dict[str, Dict[str, int]] = {
    "quick": {
        "geometry_points": 32,
        "surface_pairs": 4,
        "paths": 100,
        "steps": 1000,
        "euclidean_paths": 200,
        "euclidean_steps": 2000,
        "surface_paths": 16,
        "l2_paths": 300,
        "series_paths": 2000,
        "series_steps": 300,
        "importance_paths": 2000,
        "importance_steps": 100,
        "consistency_paths": 50,
        "consistency_steps": 1000,
        "ito_pairs": 20000,
        "ito_paths": 40,
        "ito_steps": 1000,
    },
    "acceptance": {
        "geometry_points": 256,
        "surface_pairs": 16,
        "paths": 500,
        "steps": 1000,
        "euclidean_paths": 2000,
        "euclidean_steps": 1000,
        "surface_paths": 500,
        "l2_paths": 1000,
        "series_paths": 10000,
        "series_steps": 1000,
        "importance_paths": 10000,
        "importance_steps": 100,
        "consistency_paths": 200,
        "consistency_steps": 1000,
        "ito_pairs": 200000,
        "ito_paths": 200,
        "ito_steps": 1000,
    },
}

# start and target used by the endpoint suite, keyed by manifold id
ENDPOINTS: Dict[str, Tuple[str, str]] = {
    "sphere2": ("north", "south"),
    "cylinder": ("0,0", "3.141592653589793,0.5"),
    "flat-torus": ("1,1", "4,2"),
    "so3": ("identity", "rotvec:0,0,1.5707963267948966"),
    "ellipsoid:1,1.2,0.8": ("north", "chart:1.2,0.5"),
}

SERIES_DIAGONAL = 0.11288


class CheckContext:
    def __init__(self, scale: str, seed: int, drift_sign: float = 1.0, include_surfaces: bool = False):
        if scale not in SCALES:
            raise UsageError(f"unknown check scale '{scale}' (expected one of {sorted(SCALES)})")
        self.scale = scale
        self.sizes = SCALES[scale]
        self.seed = seed
        self.drift_sign = drift_sign
        self.include_surfaces = include_surfaces

    def config(self, manifold_id: str, start: str, target: str, **fields) -> BridgeConfig:
        manifold = get_manifold(manifold_id)
        fields.setdefault("master_seed", self.seed)
        fields.setdefault("drift_sign", self.drift_sign)
        return BridgeConfig(
            manifold_id=manifold.manifold_id,
            start=manifold.to_public(parse_point(manifold, start))[0].tolist(),
            target=manifold.to_public(parse_point(manifold, target))[0].tolist(),
            **fields,
        )


def _combined_se(*errors: float) -> float:
    return math.sqrt(sum(e * e for e in errors))


# suites ----------------------------------------------------------------


def check_geometry(ctx: CheckContext) -> Tuple[bool, dict]:
    """Log/Exp round trip, finite-difference gradients, Jacobi ODE and surface cross-validation."""
    rng = np.random.default_rng(ctx.seed)
    n = ctx.sizes["geometry_points"]
    metrics: Dict[str, float] = {}
    passed = True
    h = 1e-5

    for manifold_id in ("sphere2", "sphere3", "cylinder", "flat-torus", "so3"):
        m = get_manifold(manifold_id)
        x = m.random_point(rng, n)
        w = m.random_tangent(rng, x, 0.9 * min(m.cut_radius, 2.0))
        back = m.log(x, m.exp(x, w))
        round_trip = float(np.max(np.abs(back - w)))

        v = m.exp(x, m.random_tangent(rng, x, 0.8 * min(m.cut_radius, 2.0)))
        rad = m.radial(x, v)
        frame = m.default_frame(x)
        fd = np.empty((n, m.dim))
        for i in range(m.dim):
            step = np.zeros((n, m.dim))
            step[:, i] = h
            up = 0.5 * m.distance(m.normal_chart(x, step, frame), v) ** 2
            down = 0.5 * m.distance(m.normal_chart(x, -step, frame), v) ** 2
            fd[:, i] = (up - down) / (2.0 * h)
        gradient = float(np.max(np.abs(fd - frame_coords(frame, -rad.log))))

        metrics[f"{manifold_id}.round_trip"] = round_trip
        metrics[f"{manifold_id}.gradient"] = gradient
        passed &= round_trip < 1e-7 and gradient < 1e-5

    # Theta and its radial derivative from the Jacobi equation with K = 1
    sphere = get_manifold("sphere2")
    steps = settings.SURFACE_JACOBI_STEPS
    r = np.linspace(0.2, 2.8, 8)
    y, yp, _ = integrate_jacobi(np.ones((r.size, 2 * steps + 1)), r, steps)
    theta_err = float(np.max(np.abs(y / r - sphere.theta_r(r))))
    eta_err = float(np.max(np.abs(-0.5 * (yp / y - 1.0 / r) - sphere.eta_r(r))))
    metrics["jacobi.theta"] = theta_err
    metrics["jacobi.eta"] = eta_err
    passed &= theta_err < 1e-6 and eta_err < 1e-6

    # a unit ellipsoid must reproduce the round sphere
    pairs = ctx.sizes["surface_pairs"]
    round_surface = get_manifold("ellipsoid:1,1,1")
    x = sphere.random_point(rng, pairs)
    v = sphere.exp(x, sphere.random_tangent(rng, x, 2.5))
    surface_err = float(np.max(np.abs(round_surface.distance(x, v) - sphere.distance(x, v))))
    metrics["surface.sphere_distance"] = surface_err
    passed &= surface_err < 1e-5
    return bool(passed), metrics


def check_euclidean_reduction(ctx: CheckContext) -> Tuple[bool, dict]:
    """Flat-torus bridges with sigma = I reduce to the Euclidean guided bridge."""
    cfg = ctx.config("flat-torus", "1,1", "2.5,2", T=1.0, steps=ctx.sizes["euclidean_steps"],
                     paths=ctx.sizes["euclidean_paths"], record="terminal")
    ensemble = sample_ensemble(cfg)
    dt = cfg.T / cfg.steps
    median_radial = float(np.median(ensemble.terminal_radials))
    max_log_phi = float(np.max(np.abs(ensemble.log_phi)))
    metrics = {"median_terminal_radial": median_radial, "max_abs_log_phi": max_log_phi, "dt": dt}
    return median_radial < 0.05 and max_log_phi < 5.0 * dt, metrics


def _endpoint_ids(ctx: CheckContext) -> List[str]:
    ids = list(settings.CHECK_MANIFOLDS)
    if ctx.include_surfaces:
        ids += list(settings.CHECK_SURFACES)
    return ids


def check_endpoint_convergence(ctx: CheckContext) -> Tuple[bool, dict]:
    """Median terminal radial below 0.1 at N steps and smaller again at 4N."""
    metrics: Dict[str, float] = {}
    passed = True
    for manifold_id in _endpoint_ids(ctx):
        manifold = get_manifold(manifold_id)
        start, target = ENDPOINTS.get(manifold.manifold_id, ("", ""))
        if not start:
            rng = np.random.default_rng(ctx.seed)
            points = manifold.to_public(manifold.random_point(rng, 2))
            start, target = (",".join(repr(float(c)) for c in row) for row in points)
        is_surface = manifold.uses_hint
        paths = ctx.sizes["surface_paths"] if is_surface else ctx.sizes["paths"]
        medians = []
        for steps in (ctx.sizes["steps"], 4 * ctx.sizes["steps"]):
            cfg = ctx.config(manifold_id, start, target, T=1.0, steps=steps, paths=paths,
                             record="terminal", likelihood="none")
            ensemble = sample_ensemble(cfg)
            medians.append(float(np.median(ensemble.terminal_radials)))
        metrics[f"{manifold.manifold_id}.median"] = medians[0]
        metrics[f"{manifold.manifold_id}.median_refined"] = medians[1]
        ok = medians[0] < 0.1 and medians[1] < medians[0]
        if not ok:
            logger.warning(f"⚠️ Endpoint convergence failed on {manifold.manifold_id}: {medians}")
        passed &= ok
    return bool(passed), metrics


def check_l2_bound(ctx: CheckContext) -> Tuple[bool, dict]:
    """Empirical E[r^2(Y_t)] on the 2-sphere against the L2 radial bound with nu = 2, lambda = 0."""
    T = 1.0
    cfg = ctx.config("sphere2", "north", f"{math.sin(2.0)},0,{math.cos(2.0)}", T=T,
                     steps=ctx.sizes["steps"], paths=ctx.sizes["l2_paths"], record="summary", likelihood="none")
    ensemble = sample_ensemble(cfg)
    r0 = float(ensemble.radials[0, 0])
    metrics: Dict[str, float] = {"r0": r0}
    passed = True
    for fraction in (0.25, 0.5, 0.75):
        k = int(round(fraction * cfg.steps))
        t = float(ensemble.times[k])
        empirical = float(np.mean(ensemble.radials[:, k] ** 2))
        bound = float(l2_radial_bound(r0, 2.0, 0.0, t, T))
        metrics[f"t{fraction:g}.mean_r2"] = empirical
        metrics[f"t{fraction:g}.bound"] = bound
        passed &= empirical <= bound
    return bool(passed), metrics


def check_series_agreement(ctx: CheckContext) -> Tuple[bool, dict]:
    """Monte Carlo heat kernel on the 2-sphere against the truncated series."""
    diagonal = float(series_kernel(2, np.array([1.0]), 1.0)[0])
    metrics: Dict[str, float] = {"series_diagonal": diagonal}
    passed = abs(diagonal - SERIES_DIAGONAL) < 1e-4
    sphere = get_manifold("sphere2")
    north = sphere.north()
    angles = np.linspace(0.0, 2.5, 5)
    targets = np.stack([np.sin(angles), np.zeros_like(angles), np.cos(angles)], axis=-1)
    horizons = (1.0,) if ctx.scale == "quick" else (0.5, 1.0, 2.0)
    for T in horizons:
        cfg = ctx.config("sphere2", "north", "north", T=T, steps=ctx.sizes["series_steps"],
                         paths=ctx.sizes["series_paths"])
        estimates = heat_kernel_targets(cfg, np.concatenate([targets, -north], axis=0))
        worst = 0.0
        for est in estimates[:-1]:
            worst = max(worst, abs(est.value - est.reference) / est.reference)
        antipode = estimates[-1]
        antipode_err = abs(antipode.value - antipode.reference) / antipode.reference
        metrics[f"T{T:g}.max_rel_error"] = worst
        metrics[f"T{T:g}.antipode_rel_error"] = antipode_err
        passed &= worst <= 0.10
        if ctx.scale == "acceptance":
            # local time at the cut locus is not accumulated
            passed &= antipode_err <= 0.15
    return bool(passed), metrics


def check_importance_identity(ctx: CheckContext) -> Tuple[bool, dict]:
    """E_P[D_t h] from unguided paths against E_Q[h] from guided paths on the flat torus."""
    steps = ctx.sizes["importance_steps"]
    paths = ctx.sizes["importance_paths"]
    guided = sample_ensemble(ctx.config("flat-torus", "1,1", "3,2.5", T=1.0, steps=steps, paths=paths,
                                        record="full", likelihood="none"))
    plain = sample_ensemble(ctx.config("flat-torus", "1,1", "3,2.5", T=1.0, steps=steps, paths=paths,
                                       record="full", likelihood="none", guided=False, master_seed=ctx.seed + 1))
    k = steps // 2
    log_d = np.array([log_radon_nikodym_bm(path, upto=k) for path in plain])
    weights = np.exp(log_d)
    metrics: Dict[str, float] = {"t": float(plain.times[k])}
    passed = True
    for axis in range(2):
        h_q = (guided.states[:, k, axis] < math.pi).astype(float)
        h_p = (plain.states[:, k, axis] < math.pi).astype(float)
        q_mean, q_se = float(h_q.mean()), float(h_q.std(ddof=1) / math.sqrt(paths))
        p_vals = weights * h_p
        p_mean, p_se = float(p_vals.mean()), float(p_vals.std(ddof=1) / math.sqrt(paths))
        gap = abs(p_mean - q_mean)
        metrics[f"axis{axis}.guided"] = q_mean
        metrics[f"axis{axis}.reweighted"] = p_mean
        metrics[f"axis{axis}.gap_in_se"] = gap / max(_combined_se(p_se, q_se), 1e-12)
        passed &= gap <= 3.0 * _combined_se(p_se, q_se)
    return bool(passed), metrics


def check_likelihood_consistency(ctx: CheckContext) -> Tuple[bool, dict]:
    """Brownian and general accumulators agree on log phi when sigma = I."""
    cfg = ctx.config("sphere2", "north", f"{math.sin(1.5)},0,{math.cos(1.5)}", T=1.0,
                     steps=ctx.sizes["consistency_steps"], paths=ctx.sizes["consistency_paths"],
                     record="terminal", likelihood="both")
    ensemble = sample_ensemble(cfg)
    gap = np.abs(ensemble.log_phi - ensemble.log_phi_general)
    fraction = float(np.mean(gap < 0.05))
    required = 0.95 if ctx.scale == "acceptance" else 0.9
    metrics = {
        "fraction_within": fraction,
        "median_gap": float(np.median(gap)),
        "max_gap": float(np.max(gap)),
        "max_expansion_remainder": float(np.max(np.abs(ensemble.expansion_remainder))),
    }
    return fraction >= required, metrics


def radial_residuals(ensemble, margin: float = 0.3) -> np.ndarray:
    """Residuals r_{k+1} - r_k - 0.5 * Lap(r)(r_k) * dt of recorded radials.

    Steps starting within ``margin`` of the target or of the cut locus are
    dropped, since r is not smooth there.
    """
    manifold = get_manifold(ensemble.manifold_id)
    r = ensemble.radials
    dt = np.diff(ensemble.times)
    start, step = r[:, :-1], np.diff(r, axis=1)
    keep = (start > margin) & (start < manifold.cut_radius - margin)
    lap_r = (manifold.half_lap_r(np.where(keep, start, 1.0)) - 1.0) / np.where(keep, start, 1.0)
    return (step - 0.5 * lap_r * dt)[keep]


def check_radial_ito(ctx: CheckContext) -> Tuple[bool, dict]:
    """Radial martingale part of unconditioned motion and the Laplacian of r^2.

    On the 2-sphere the residual r_{k+1} - r_k - 0.5 Lap(r) dt of plain
    Brownian paths must have variance dt within 5%. The mean antithetic change
    of r^2 over a short step must match half the Laplacian of r^2.
    """
    cfg = ctx.config("sphere2", "north", f"{math.sin(1.5)},0,{math.cos(1.5)}", T=1.0,
                     steps=ctx.sizes["ito_steps"], paths=ctx.sizes["ito_paths"], guided=False,
                     record="summary", likelihood="none")
    ensemble = sample_ensemble(cfg)
    dt = cfg.T / cfg.steps
    residuals = radial_residuals(ensemble)
    variance_ratio = float(np.var(residuals) / dt)
    metrics: Dict[str, float] = {
        "residual_variance_ratio": variance_ratio,
        "residual_mean_over_dt": float(np.mean(residuals) / dt),
        "residual_count": float(residuals.size),
    }
    passed = abs(variance_ratio - 1.0) <= 0.05

    rng = np.random.default_rng(ctx.seed)
    pairs = ctx.sizes["ito_pairs"]
    dt = 1e-4
    h = 1e-5
    for manifold_id in ("sphere2", "sphere3", "so3"):
        m = get_manifold(manifold_id)
        base = m.random_point(rng, 1)
        frame = m.default_frame(base)
        for r in (0.5, 1.0, 2.0):
            direction = np.zeros((1, m.dim))
            direction[0, 0] = r
            v = m.exp(base, from_frame(frame, direction))
            x = np.repeat(base, pairs, axis=0)
            frames = np.repeat(frame, pairs, axis=0)
            targets = np.repeat(v, pairs, axis=0)
            c = math.sqrt(dt) * rng.standard_normal((pairs, m.dim))
            up, _ = m.develop(x, frames, c)
            down, _ = m.develop(x, frames, -c)
            change = 0.5 * (m.distance(up, targets) ** 2 + m.distance(down, targets) ** 2) - r ** 2
            estimate = float(np.mean(change) / dt)
            se = float(np.std(change, ddof=1) / dt / math.sqrt(pairs))
            exact = float(m.half_lap_r(np.array([r]))[0])
            eta_fd = -0.25 * (math.log(m.theta_r(np.array([r + h]))[0]) - math.log(m.theta_r(np.array([r - h]))[0])) / h
            eta_err = abs(eta_fd - float(m.eta_r(np.array([r]))[0]))
            metrics[f"{manifold_id}.r{r:g}.half_laplacian"] = estimate
            metrics[f"{manifold_id}.r{r:g}.exact"] = exact
            metrics[f"{manifold_id}.r{r:g}.eta_error"] = eta_err
            passed &= abs(estimate - exact) <= 3.0 * se + 0.01 * abs(exact) and eta_err < 1e-6
    return bool(passed), metrics


SUITES: Dict[str, Callable[[CheckContext], Tuple[bool, dict]]] = {
    "geometry": check_geometry,
    "euclidean_reduction": check_euclidean_reduction,
    "endpoint_convergence": check_endpoint_convergence,
    "l2_bound": check_l2_bound,
    "series_agreement": check_series_agreement,
    "importance_identity": check_importance_identity,
    "likelihood_consistency": check_likelihood_consistency,
    "radial_ito": check_radial_ito,
}


def run_suite(name: str, ctx: CheckContext) -> SuiteResult:
    if name not in SUITES:
        raise UsageError(f"unknown check suite '{name}' (expected one of {sorted(SUITES)})")
    started = time.perf_counter()
    error: Optional[str] = None
    try:
        passed, metrics = SUITES[name](ctx)
    except BridgeError as exc:
        passed, metrics, error = False, {}, f"{type(exc).__name__}: {exc.detail}"
    except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        passed, metrics, error = False, {}, f"{type(exc).__name__}: {exc}"
    duration_ms = (time.perf_counter() - started) * 1000.0
    log_suite_result(name, passed, duration_ms, error)
    return SuiteResult(name=name, passed=bool(passed), metrics=metrics, duration_ms=duration_ms, error=error)


def run_checks(
    scale: str = "quick",
    seed: Optional[int] = None,
    suites: Optional[Iterable[str]] = None,
    include_surfaces: bool = False,
    drift_sign: float = 1.0,
) -> CheckReport:
    """Run the selected suites (all by default) and collect a report."""
    seed = settings.DEFAULT_SEED if seed is None else seed
    ctx = CheckContext(scale, seed, drift_sign=drift_sign, include_surfaces=include_surfaces)
    names = list(suites) if suites else list(SUITES)
    unknown = [name for name in names if name not in SUITES]
    if unknown:
        raise UsageError(f"unknown check suite(s): {', '.join(unknown)}")
    if drift_sign != 1.0:
        logger.warning(f"⚠️ Guiding drift sign overridden to {drift_sign:g}")
    results = [run_suite(name, ctx) for name in names]
    return CheckReport(passed=all(r.passed for r in results), scale=scale, seed=seed, suites=results)
