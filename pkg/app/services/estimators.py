"""Monte Carlo estimators built on guided ensembles.

Weights are the accumulated likelihood ratios exp(log phi) at t_{N-1}. All
reductions run in path-index order so reruns are bit-identical.
"""

import math
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from scipy.special import eval_gegenbauer, eval_legendre, gammaln, logsumexp

from app.core.config import settings
from app.core.exceptions import (
    DegenerateWeightsError,
    EnsembleError,
    EstimationError,
    UsageError,
)
from app.core.logger import log_estimate
from app.models.bridge import BridgeConfig, BridgeEnsemble, BridgePath, DriverSpec
from app.models.estimates import DensityEstimate, MeanEstimate, ProfileRow, WeightedMean
from app.models.geometry import ManifoldPoint
from app.services.likelihood import dispersion_parts, g_batch
from app.services.manifolds import FlatProduct, Manifold, Sphere, get_manifold, internal_point, point_model
from app.services.sde_engine import run_ensemble, sample_ensemble
from app.services.surfaces import ImplicitSurface
from app.utils.linalg import TWO_PI, dot, frame_coords


# reductions ------------------------------------------------------------


def weighted_mean(values, log_weights, paths: Optional[int] = None) -> WeightedMean:
    """Self-normalized estimate sum w f / sum w with a delta-method standard error."""
    f = np.asarray(values, dtype=float)
    lw = np.asarray(log_weights, dtype=float)
    if f.shape != lw.shape or f.size == 0:
        raise UsageError("values and log weights must be non-empty and of equal length")
    finite = np.isfinite(lw)
    if not finite.any():
        raise DegenerateWeightsError("all importance weights are zero or non-finite")
    w = np.where(finite, np.exp(lw - np.max(lw[finite])), 0.0)
    total = w.sum()
    if not total > 0.0:
        raise DegenerateWeightsError("all importance weights are zero")
    value = float(np.sum(w * f) / total)
    std_error = float(np.sqrt(np.sum(w ** 2 * (f - value) ** 2)) / total)
    ess = float(total ** 2 / np.sum(w ** 2))
    m = int(paths or f.size)
    return WeightedMean(
        value=value,
        std_error=std_error,
        ess=min(ess, float(m)),
        paths=m,
        low_confidence=ess < settings.ESS_FLOOR * m,
    )


def conditional_expectation(f: Union[Callable[[BridgePath], float], Sequence[float]], ensemble: BridgeEnsemble) -> WeightedMean:
    """E[f(X) | X_T = v] from a guided ensemble.

    ``f`` is either a path functional or the precomputed values per path.
    """
    values = np.array([f(path) for path in ensemble], dtype=float) if callable(f) else np.asarray(f, dtype=float)
    if values.shape[0] != len(ensemble):
        raise UsageError(f"expected {len(ensemble)} values, got {values.shape[0]}")
    ok = ensemble.ok
    estimate = weighted_mean(values[ok], ensemble.log_phi[ok], paths=len(ensemble))
    log_estimate("conditional_expectation", estimate.value, estimate.std_error, estimate.ess, estimate.paths, estimate.low_confidence)
    return estimate


def _mean_of_exp(log_values: np.ndarray) -> Tuple[float, float, float]:
    """mean(exp(x)), its standard error and the ESS of exp(x)."""
    finite = np.isfinite(log_values)
    if not finite.any():
        raise DegenerateWeightsError("all likelihood ratios are zero or non-finite")
    top = np.max(log_values[finite])
    w = np.where(finite, np.exp(log_values - top), 0.0)
    m = w.size
    mean = float(np.mean(w))
    if not mean > 0.0:
        raise DegenerateWeightsError("all likelihood ratios are zero")
    std = float(np.std(w, ddof=1)) if m > 1 else 0.0
    scale = math.exp(top)
    ess = float(w.sum() ** 2 / np.sum(w ** 2))
    return mean * scale, std * scale / math.sqrt(m), ess


# closed-form references ------------------------------------------------


def euclidean_kernel(r, T: float, d: int):
    """Gaussian density of Brownian motion in R^d at distance r after time T."""
    return (TWO_PI * T) ** (-0.5 * d) * np.exp(-np.asarray(r) ** 2 / (2.0 * T))


def series_kernel(d: int, cos_angle, t: float, l_max: Optional[int] = None) -> np.ndarray:
    """Eigenfunction expansion of the kernel of exp(t Laplacian) on S^d."""
    if not t > 0.0:
        raise UsageError("the series needs t > 0")
    l_max = settings.SERIES_L_MAX if l_max is None else int(l_max)
    if l_max < 0:
        raise UsageError("l_max must be non-negative")
    c = np.clip(np.asarray(cos_angle, dtype=float), -1.0, 1.0)
    log_area = math.log(2.0) + 0.5 * (d + 1) * math.log(math.pi) - gammaln(0.5 * (d + 1))
    alpha = 0.5 * (d - 1)
    total = np.zeros_like(c)
    for l in range(l_max + 1):
        decay = math.exp(-l * (l + d - 1) * t)
        if d == 2:
            harmonic = (2 * l + 1) * eval_legendre(l, c)
        else:
            harmonic = (2 * l + d - 1) / (d - 1) * eval_gegenbauer(l, alpha, c)
        total = total + decay * harmonic
    return total * math.exp(-log_area)


def sphere_heat_kernel_series(
    x: ManifoldPoint, y: ManifoldPoint, t: float, l_max: Optional[int] = None, brownian_time: bool = False
) -> float:
    """Truncated series of the sphere heat kernel.

    With ``brownian_time`` the value is the density of Brownian motion
    (generator half the Laplacian) at time t, i.e. the series at t / 2.
    """
    mx, px = internal_point(x)
    my, py = internal_point(y)
    if not isinstance(mx, Sphere) or mx.manifold_id != my.manifold_id:
        raise UsageError("the heat kernel series is defined for two points on the same sphere")
    if not t > 0.0:
        raise UsageError("the series needs t > 0")
    tt = 0.5 * t if brownian_time else t
    return float(series_kernel(mx.dim, dot(px, py), tt, l_max)[0])


def _flat_kernel(manifold: FlatProduct, x: np.ndarray, y: np.ndarray, T: float, images: int = 5) -> np.ndarray:
    diff = y - x
    shifts = np.arange(images) - images // 2
    density = np.ones(x.shape[0])
    for i in range(manifold.dim):
        if manifold.periodic[i]:
            offsets = diff[:, i, None] + TWO_PI * shifts[None, :]
            density = density * np.sum(euclidean_kernel(offsets, T, 1), axis=-1)
        else:
            density = density * euclidean_kernel(diff[:, i], T, 1)
    return density


def flat_heat_kernel(x: ManifoldPoint, y: ManifoldPoint, T: float, images: int = 5) -> float:
    """Wrapped Gaussian image sum on cylinders and flat tori."""
    mx, px = internal_point(x)
    my, py = internal_point(y)
    if not isinstance(mx, FlatProduct) or mx.manifold_id != my.manifold_id:
        raise UsageError("the image sum is defined for two points on the same flat manifold")
    if not T > 0.0 or images < 1:
        raise UsageError("the image sum needs T > 0 and at least one image")
    return float(_flat_kernel(mx, px, py, T, images)[0])


def reference_density(manifold: Manifold, x: np.ndarray, y: np.ndarray, T: float, l_max: Optional[int] = None) -> Optional[np.ndarray]:
    """Closed-form Brownian density where one exists (spheres, flat products)."""
    if isinstance(manifold, Sphere):
        return series_kernel(manifold.dim, dot(x, y), 0.5 * T, l_max)
    if isinstance(manifold, FlatProduct):
        return _flat_kernel(manifold, x, y, T)
    return None


# heat kernel -----------------------------------------------------------


def _density_estimate(log_phi: np.ndarray, ok: np.ndarray, r0: float, d: int, cfg: BridgeConfig,
                      reference: Optional[float] = None) -> DensityEstimate:
    mean, std_error, ess = _mean_of_exp(np.where(ok, log_phi, -np.inf))
    prefactor = float(euclidean_kernel(r0, cfg.T, d))
    m = int(log_phi.size)
    estimate = DensityEstimate(
        value=prefactor * mean,
        std_error=prefactor * std_error,
        ess=min(ess, float(m)),
        paths=m,
        steps=cfg.steps,
        T=cfg.T,
        radial=r0,
        low_confidence=ess < settings.ESS_FLOOR * m,
        reference=reference,
    )
    log_estimate("heat_kernel", estimate.value, estimate.std_error, estimate.ess, m, estimate.low_confidence)
    return estimate


def heat_kernel_bm(x0: ManifoldPoint, v: ManifoldPoint, T: float, ensemble: BridgeEnsemble) -> DensityEstimate:
    """(2 pi T)^(-d/2) exp(-d(x0, v)^2 / 2T) E[phi_T] from a Brownian guided ensemble x0 -> v."""
    manifold, px = internal_point(x0)
    mv, pv = internal_point(v)
    if mv.manifold_id != manifold.manifold_id or ensemble.manifold_id != manifold.manifold_id:
        raise UsageError("x0, v and the ensemble must live on the same manifold")
    if not math.isclose(ensemble.config.T, T, rel_tol=1e-12):
        raise UsageError(f"ensemble horizon {ensemble.config.T:g} differs from T = {T:g}")
    if ensemble.config.likelihood in ("general", "none"):
        raise UsageError("heat_kernel_bm needs the Brownian likelihood accumulator")
    r0 = float(manifold.distance(px, pv)[0])
    reference = reference_density(manifold, px, pv, T)
    return _density_estimate(
        ensemble.log_phi, ensemble.ok, r0, manifold.dim, ensemble.config,
        None if reference is None else float(reference[0]),
    )


def transition_density_general(x0: ManifoldPoint, v: ManifoldPoint, T: float, ensemble: BridgeEnsemble,
                               spec: DriverSpec) -> DensityEstimate:
    """Transition density for a constant-dispersion driver from the general accumulator."""
    manifold, px = internal_point(x0)
    _, pv = internal_point(v)
    if not spec.is_constant_sigma:
        raise UsageError("the density formula needs a constant dispersion")
    if ensemble.log_phi_general is None:
        raise UsageError("the ensemble was simulated without the general likelihood accumulator")
    d = manifold.dim
    z0 = np.zeros((1, d))
    _, sigma_inv, a_inv = dispersion_parts(spec, 0.0, z0)
    rad = manifold.radial(px, pv)
    r0 = float(rad.r[0])
    safe = r0 if r0 > 0.0 else 1.0
    xi0 = frame_coords(manifold.default_frame(px), -rad.log / safe)
    log_psi0 = -0.5 * float(g_batch(rad.r, xi0, T, sigma_inv)[0])
    mean, std_error, ess = _mean_of_exp(np.where(ensemble.ok, ensemble.log_phi_general, -np.inf))
    prefactor = math.sqrt(float(np.linalg.det(a_inv[0]))) * (TWO_PI * T) ** (-0.5 * d) * math.exp(log_psi0)
    m = len(ensemble)
    estimate = DensityEstimate(
        value=prefactor * mean,
        std_error=prefactor * std_error,
        ess=min(ess, float(m)),
        paths=m,
        steps=ensemble.config.steps,
        T=T,
        radial=r0,
        low_confidence=ess < settings.ESS_FLOOR * m,
    )
    log_estimate("transition_density_general", estimate.value, estimate.std_error, estimate.ess, m, estimate.low_confidence)
    return estimate


def heat_kernel_targets(cfg: BridgeConfig, targets: np.ndarray, l_max: Optional[int] = None) -> List[DensityEstimate]:
    """Heat kernel from cfg.start to each internal target, one batched run.

    Every target reuses path indices 0..M-1, so neighbouring targets see
    common random numbers.
    """
    manifold = get_manifold(cfg.manifold_id)
    k = targets.shape[0]
    if k == 0:
        raise UsageError("at least one target is required")
    m = cfg.paths
    x0 = manifold.to_internal(cfg.start)
    run_cfg = cfg.model_copy(update={"paths": m * k, "likelihood": "bm", "record": "terminal"})
    try:
        ensemble = sample_ensemble(
            run_cfg,
            starts=x0,
            targets=np.repeat(targets, m, axis=0),
            path_indices=np.tile(np.arange(m), k),
        )
    except EnsembleError as exc:
        ensemble = exc.ensemble
        logger.warning(f"⚠️ {len(exc.failures)} bridge(s) failed, estimating from the remaining paths")

    r0 = manifold.distance(np.repeat(x0, k, axis=0), targets)
    reference = reference_density(manifold, np.repeat(x0, k, axis=0), targets, cfg.T, l_max)
    estimates: List[DensityEstimate] = []
    errors = []
    for i in range(k):
        rows = slice(i * m, (i + 1) * m)
        try:
            estimates.append(_density_estimate(
                ensemble.log_phi[rows], ensemble.ok[rows], float(r0[i]), manifold.dim, cfg,
                None if reference is None else float(reference[i]),
            ))
        except DegenerateWeightsError as exc:
            errors.append({"target": i, "detail": exc.detail})
    if errors:
        raise EstimationError(f"{len(errors)} of {k} target(s) produced degenerate weights", errors=errors)
    return estimates


# profiles and grids ----------------------------------------------------


def geodesic_profile_targets(manifold: Manifold, x0: np.ndarray, end: Optional[np.ndarray] = None,
                             n: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """n points along the geodesic from x0 to ``end`` and their arc lengths.

    Without ``end`` the profile follows the first default frame direction up
    to the cut radius (north to south on spheres), or for length 2 when the
    manifold has no cut locus.
    """
    n = n or settings.PROFILE_POINTS
    if n < 1:
        raise UsageError("a profile needs at least one point")
    direction = manifold.default_frame(x0)[:, 0, :]
    length = float(manifold.cut_radius) if np.isfinite(manifold.cut_radius) else 2.0
    if end is not None:
        rad = manifold.radial(x0, end)
        length = float(rad.r[0])
        if not rad.band[0] and length > 0.0:
            direction = rad.log / length
    arcs = np.linspace(0.0, length, n)
    points = manifold.exp(np.repeat(x0, n, axis=0), arcs[:, None] * np.repeat(direction, n, axis=0))
    return points, arcs


def density_profile(cfg: BridgeConfig, targets: Optional[np.ndarray] = None, end: Optional[np.ndarray] = None,
                    points: Optional[int] = None, l_max: Optional[int] = None) -> List[ProfileRow]:
    """Heat kernel estimates along a geodesic (or at explicit internal targets)."""
    manifold = get_manifold(cfg.manifold_id)
    x0 = manifold.to_internal(cfg.start)
    if targets is None:
        targets, arcs = geodesic_profile_targets(manifold, x0, end, points)
    else:
        if targets.shape[0] == 0:
            raise UsageError("the target list is empty")
        arcs = manifold.distance(np.repeat(x0, targets.shape[0], axis=0), targets)
    estimates = heat_kernel_targets(cfg, targets, l_max)
    public = manifold.to_public(targets)
    series = None
    if isinstance(manifold, Sphere):
        series = series_kernel(manifold.dim, dot(np.repeat(x0, targets.shape[0], axis=0), targets), 0.5 * cfg.T, l_max)
    return [
        ProfileRow(
            arc_length=float(arcs[i]),
            target=public[i].tolist(),
            estimate=estimates[i],
            series=None if series is None else float(series[i]),
            euclidean=float(euclidean_kernel(estimates[i].radial, cfg.T, manifold.dim)),
        )
        for i in range(targets.shape[0])
    ]


def grid_cells(manifold: Manifold, x0: np.ndarray, T: float, resolution: Optional[int] = None):
    """Cell-centre chart points, internal points and volume weights of a 2-D chart grid."""
    n = resolution or settings.GRID_RESOLUTION
    if manifold.dim != 2:
        raise UsageError(f"density grids need a two-dimensional manifold, {manifold.manifold_id} has dimension {manifold.dim}")
    if n < 2:
        raise UsageError("grid resolution must be at least 2")
    centres = (np.arange(n) + 0.5) / n
    if isinstance(manifold, Sphere):
        spans = [(0.0, math.pi), (0.0, TWO_PI)]
    elif isinstance(manifold, FlatProduct):
        half = 5.0 * math.sqrt(T)
        spans = [(0.0, TWO_PI) if manifold.periodic[i] else (x0[0, i] - half, x0[0, i] + half) for i in range(2)]
    elif isinstance(manifold, ImplicitSurface):
        spans = [(0.0, TWO_PI) if manifold.periodic[i] else (0.0, math.pi) for i in range(2)]
    else:
        raise UsageError(f"no chart grid for {manifold.manifold_id}")
    axes = [lo + (hi - lo) * centres for lo, hi in spans]
    q1, q2 = np.meshgrid(axes[0], axes[1], indexing="ij")
    q = np.stack([q1.ravel(), q2.ravel()], axis=-1)
    cell = (spans[0][1] - spans[0][0]) * (spans[1][1] - spans[1][0]) / n ** 2

    if isinstance(manifold, Sphere):
        st = np.sin(q[:, 0])
        pts = np.stack([st * np.cos(q[:, 1]), st * np.sin(q[:, 1]), np.cos(q[:, 0])], axis=-1)
        weights = st * cell
    elif isinstance(manifold, FlatProduct):
        pts = manifold.project(q)
        weights = np.full(q.shape[0], cell)
    else:
        pts = manifold.embed(q)
        weights = np.sqrt(np.linalg.det(manifold.metric(q))) * cell
    return q, pts, weights


def density_grid(cfg: BridgeConfig, resolution: Optional[int] = None) -> List[dict]:
    """Rows (q1, q2, density, std_error, cell_weight) over a chart grid."""
    manifold = get_manifold(cfg.manifold_id)
    x0 = manifold.to_internal(cfg.start)
    q, pts, weights = grid_cells(manifold, x0, cfg.T, resolution)
    estimates = heat_kernel_targets(cfg, pts)
    return [
        {
            "q1": float(q[i, 0]),
            "q2": float(q[i, 1]),
            "density": estimates[i].value,
            "std_error": estimates[i].std_error,
            "cell_weight": float(weights[i]),
            "reference": estimates[i].reference,
        }
        for i in range(q.shape[0])
    ]


def grid_mass(rows: Sequence[dict]) -> float:
    return float(sum(row["density"] * row["cell_weight"] for row in rows))


# diffusion mean --------------------------------------------------------


def _data_points(data: Sequence[ManifoldPoint]) -> Tuple[Manifold, np.ndarray]:
    if not data:
        raise UsageError("the diffusion mean needs at least one data point")
    manifold, first = internal_point(data[0])
    rows = [first]
    for point in data[1:]:
        m, p = internal_point(point)
        if m.manifold_id != manifold.manifold_id:
            raise UsageError("all data points must live on the same manifold")
        rows.append(p)
    return manifold, np.concatenate(rows, axis=0)


def _log_likelihoods(manifold: Manifold, starts: np.ndarray, frames: np.ndarray, data: np.ndarray, T: float,
                     steps: int, per_datum: int, seed: int) -> np.ndarray:
    """sum_i log p_T(m, y_i) for each candidate m (one row of ``starts``), batched.

    Every candidate reuses the same path indices (common random numbers).
    """
    c = starts.shape[0]
    n = data.shape[0]
    rows = n * per_datum
    cfg = BridgeConfig(
        manifold_id=manifold.manifold_id,
        start=manifold.to_public(starts[:1])[0].tolist(),
        target=manifold.to_public(data[:1])[0].tolist(),
        T=T,
        steps=steps,
        paths=rows * c,
        master_seed=seed,
        record="terminal",
        likelihood="bm",
    )
    targets = np.tile(np.repeat(data, per_datum, axis=0), (c,) + (1,) * (data.ndim - 1))
    ensemble = run_ensemble(
        cfg,
        path_indices=np.tile(np.arange(rows), c),
        starts=np.repeat(starts, rows, axis=0),
        targets=targets,
        start_frames=np.repeat(frames, rows, axis=0),
    )
    if not ensemble.ok.all():
        logger.warning(f"⚠️ {int(np.sum(~ensemble.ok))} bridge(s) failed, counted as zero density")
    r0 = manifold.distance(np.repeat(starts, rows, axis=0), targets)
    log_density = (
        -0.5 * manifold.dim * math.log(TWO_PI * T) - r0 ** 2 / (2.0 * T) + np.where(ensemble.ok, ensemble.log_phi, -np.inf)
    )
    per_datum_log = logsumexp(log_density.reshape(c, n, per_datum), axis=-1) - math.log(per_datum)
    return np.sum(per_datum_log, axis=-1)


def diffusion_mean(
    data: Sequence[ManifoldPoint],
    T: float,
    initial: Optional[ManifoldPoint] = None,
    steps: Optional[int] = None,
    paths_per_datum: Optional[int] = None,
    max_iters: Optional[int] = None,
    tol: Optional[float] = None,
    step_size: float = 1.0,
    chart_step: Optional[float] = None,
    seed: Optional[int] = None,
) -> MeanEstimate:
    """Maximize sum_i log p_T(m, y_i) by gradient ascent in normal charts.

    The gradient is a central difference of the mean log likelihood in the
    normal chart at the current iterate; every evaluation reuses the same
    random numbers. Steps of ``step_size * T * grad`` are halved until the
    likelihood does not decrease.
    """
    if not T > 0.0:
        raise UsageError("the diffusion time must be positive")
    manifold, ys = _data_points(data)
    n = ys.shape[0]
    steps = steps or settings.MEAN_STEPS
    per_datum = paths_per_datum or settings.MEAN_PATHS_PER_DATUM
    max_iters = settings.MEAN_MAX_ITERS if max_iters is None else max_iters
    tol = settings.MEAN_TOL if tol is None else tol
    h = chart_step or settings.MEAN_CHART_STEP
    seed = settings.DEFAULT_SEED if seed is None else seed
    d = manifold.dim

    if initial is not None:
        m0_manifold, m = internal_point(initial)
        if m0_manifold.manifold_id != manifold.manifold_id:
            raise UsageError("the initial guess lives on a different manifold than the data")
    else:
        m = manifold.mean_point(ys)
    frame = manifold.default_frame(m)

    def evaluate(points: np.ndarray, frames: np.ndarray) -> np.ndarray:
        return _log_likelihoods(manifold, points, frames, ys, T, steps, per_datum, seed)

    offsets = np.concatenate([np.zeros((1, d)), h * np.eye(d), -h * np.eye(d)], axis=0)

    iterates = [point_model(manifold, m)]
    log_likelihoods: List[float] = []
    gradient_norms: List[float] = []
    step_sizes: List[float] = [0.0]
    converged = False
    iterations = 0

    for iteration in range(max_iters + 1):
        moved, moved_frames = manifold.develop(
            np.repeat(m, offsets.shape[0], axis=0), np.repeat(frame, offsets.shape[0], axis=0), offsets
        )
        values = evaluate(moved, moved_frames)
        if not np.isfinite(values[0]):
            raise EstimationError("the likelihood is degenerate at the current iterate", iteration=iteration)
        grad = (values[1:1 + d] - values[1 + d:]) / (2.0 * h * n)
        grad = np.where(np.isfinite(grad), grad, 0.0)
        grad_norm = float(np.linalg.norm(grad))
        log_likelihoods.append(float(values[0]))
        gradient_norms.append(grad_norm)
        logger.debug(f"Diffusion mean iteration {iteration}: loglik={values[0]:.6g} |grad|={grad_norm:.3g}")
        if grad_norm < tol:
            converged = True
            break
        if iteration == max_iters:
            break

        size = step_size
        accepted = False
        for _ in range(12):
            candidate, candidate_frame = manifold.develop(m, frame, (size * T * grad)[None, :])
            value = evaluate(candidate, candidate_frame)[0]
            if np.isfinite(value) and value >= values[0]:
                accepted = True
                break
            size *= 0.5
        if not accepted:
            logger.warning(f"⚠️ Backtracking found no ascent step at iteration {iteration}")
            break
        m, frame = candidate, candidate_frame
        iterations += 1
        iterates.append(point_model(manifold, m))
        step_sizes.append(size)

    if not np.all(np.isfinite(log_likelihoods)):
        raise EstimationError("non-finite log likelihood along the iterates")
    estimate = MeanEstimate(
        iterates=iterates,
        log_likelihoods=log_likelihoods,
        gradient_norms=gradient_norms,
        step_sizes=step_sizes,
        converged=converged,
        iterations=iterations,
        T=T,
    )
    if converged:
        logger.info(f"✅ Diffusion mean converged after {iterations} iteration(s)")
    else:
        logger.warning(f"⚠️ Diffusion mean stopped after {iterations} iteration(s) without meeting tol={tol:g}")
    return estimate
