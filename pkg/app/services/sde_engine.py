"""Stochastic development and guided radial bridges.

Paths are simulated in fixed-size chunks (one numpy batch per chunk); chunks
run on a thread pool and are merged back in path-index order. Each path reads
its normals from its own counter-based stream, so results do not depend on
chunking or scheduling.

One step from t_k to t_{k+1} with tau = T - t_k:

    xi    = frame coordinates of grad r_v (zero in the cut band)
    drift = frame coordinates of Log_x v / tau (optionally capped)
    dZ    = a dt + sigma sqrt(dt) N(0, I)
    c     = dZ + drift dt
    (x, F) <- geodesic step along sum_i c_i F_i with parallel transport of F

The last grid time is t_{N-1} = T - dt; the singular final interval is never
integrated.
"""

import time
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence

import numpy as np
from loguru import logger

from app.core.config import settings
from app.core.exceptions import DriverError, EnsembleError, PathError, UsageError
from app.core.logger import log_ensemble_run
from app.models.bridge import BridgeConfig, BridgeEnsemble, BridgePath, DriverSpec
from app.models.geometry import FramePoint, ManifoldPoint
from app.services.likelihood import (
    bm_increment,
    dispersion_derivative,
    dispersion_parts,
    g_batch,
    general_increment,
)
from app.services.manifolds import Manifold, frame_model, get_manifold, internal_frame, internal_point
from app.utils.linalg import frame_coords, norm
from app.utils.rng import path_normals


def time_grid(T: float, steps: int, kind: str = "uniform") -> np.ndarray:
    """Grid t_0 = 0 < ... < t_{N-1} = T - T/N."""
    if steps < 2 or T <= 0.0:
        raise UsageError("time grids need T > 0 and at least two steps")
    if kind == "uniform":
        return np.arange(steps) * (T / steps)
    if kind == "geometric":
        ratio = steps ** (-1.0 / (steps - 1))
        return T - T * ratio ** np.arange(steps)
    raise UsageError(f"unknown time grid '{kind}'")


def driver_increment(spec: DriverSpec, t: float, z: np.ndarray, dt: float, noise: np.ndarray):
    """Batched (dZ, dW) with dW = sqrt(dt) * noise."""
    try:
        a = spec.a(t, z)
        sigma = spec.sigma(t, z)
    except Exception as exc:
        raise DriverError(f"driver evaluation failed at t={t:g}: {exc}")
    dW = np.sqrt(dt) * noise
    return a * dt + np.einsum("bij,bj->bi", sigma, dW), dW


def sample_driver_increment(spec: DriverSpec, t: float, z, dt: float,
                            rng: Optional[np.random.Generator] = None, noise=None) -> np.ndarray:
    if dt <= 0.0:
        raise UsageError("driver increments need dt > 0")
    z_row = np.atleast_2d(np.asarray(z, dtype=float))
    if noise is None:
        rng = rng or np.random.default_rng()
        noise = rng.standard_normal(spec.dimension)
    dZ, _ = driver_increment(spec, t, z_row, dt, np.atleast_2d(np.asarray(noise, dtype=float)))
    return dZ[0]


def develop_step(f: FramePoint, dZ) -> FramePoint:
    manifold, p, frame = internal_frame(f)
    c = np.atleast_2d(np.asarray(dZ, dtype=float))
    if c.shape[-1] != manifold.dim:
        raise UsageError(f"increment has {c.shape[-1]} components, the manifold has dimension {manifold.dim}")
    p_next, frame_next = manifold.develop(p, frame, c)
    return frame_model(manifold, p_next, frame_next)


def cap_drift(drift: np.ndarray, cap: Optional[float]):
    if cap is None:
        return drift, np.zeros(drift.shape[0], dtype=bool)
    size = norm(drift)
    over = size > cap
    scale = np.where(over, cap / np.where(over, size, 1.0), 1.0)
    return drift * scale[:, None], over


def guided_drift(f: FramePoint, v: ManifoldPoint, t: float, T: float, drift_cap: Optional[float] = None) -> np.ndarray:
    """Log_x v / (T - t) in frame coordinates; zero in the cut band."""
    if not t < T:
        raise UsageError(f"the guiding drift is undefined for t = {t:g} >= T = {T:g}")
    manifold, p, frame = internal_frame(f)
    mv, pv = internal_point(v)
    if mv.manifold_id != manifold.manifold_id:
        raise UsageError("frame and target live on different manifolds")
    rad = manifold.radial(p, pv)
    drift, _ = cap_drift(frame_coords(frame, rad.log) / (T - t), drift_cap)
    return drift[0]


def resolve_likelihood(cfg: BridgeConfig, spec: DriverSpec) -> str:
    if cfg.likelihood == "auto":
        return "bm" if spec.is_brownian else "general"
    if cfg.likelihood in ("bm", "both") and not spec.is_brownian:
        raise UsageError("the Brownian likelihood needs a Brownian driver")
    return cfg.likelihood


def _unit_radial(rad, frame: np.ndarray) -> np.ndarray:
    r_safe = np.where(rad.r > 0.0, rad.r, 1.0)
    xi = frame_coords(frame, -rad.log / r_safe[:, None])
    return np.where((rad.band | (rad.r <= 0.0))[:, None], 0.0, xi)


def _run_chunk(
    manifold: Manifold,
    cfg: BridgeConfig,
    spec: DriverSpec,
    indices: np.ndarray,
    x0: np.ndarray,
    v: np.ndarray,
    frame0: np.ndarray,
    times: np.ndarray,
    mode: str,
) -> Dict[str, np.ndarray]:
    n = indices.size
    steps = times.size
    d = manifold.dim
    T = cfg.T
    full = cfg.record == "full"
    keep_radial = cfg.record in ("full", "summary")
    run_bm = mode in ("bm", "both")
    run_general = mode in ("general", "both")
    track_radial = cfg.guided or mode != "none" or keep_radial

    normals = path_normals(cfg.master_seed, indices, (steps - 1, d))
    x, frame = x0.copy(), frame0.copy()
    z = np.zeros((n, d))
    failed = np.full(n, -1, dtype=int)
    point_axes = (1,) * (x.ndim - 1)

    log_phi_bm = np.zeros(n)
    log_phi_gen = np.zeros(n)
    remainder = np.zeros(n)
    eta_accum = np.zeros(n)
    local_time = np.zeros(n)
    crossings = np.zeros(n, dtype=int)
    capped = np.zeros(n, dtype=int)

    out: Dict[str, np.ndarray] = {}
    if full:
        out["states"] = np.empty((n, steps) + x.shape[1:])
        out["frames"] = np.empty((n, steps) + frame.shape[1:])
        out["increments"] = np.empty((n, steps - 1, d))
        out["states"][:, 0] = x
        out["frames"][:, 0] = frame
    if keep_radial:
        out["radials"] = np.empty((n, steps))
        out["radial_drive"] = np.empty((n, steps - 1))
        out["log_phi_partial"] = np.zeros((n, steps))

    constant_parts = dispersion_parts(spec, 0.0, z) if run_general and spec.is_constant_sigma else None

    def parts(t, zz):
        return constant_parts if constant_parts is not None else dispersion_parts(spec, t, zz)

    rad = manifold.radial(x, v) if track_radial else None
    cut_estimate = rad.dist_to_cut.copy() if track_radial else None
    if keep_radial:
        out["radials"][:, 0] = rad.r

    for k in range(steps - 1):
        t, dt = times[k], times[k + 1] - times[k]
        tau, tau_next = T - t, T - times[k + 1]
        alive = failed < 0

        with np.errstate(all="ignore"):
            xi = np.zeros((n, d))
            drift = np.zeros((n, d))
            if track_radial:
                xi = _unit_radial(rad, frame)
                if cfg.guided:
                    drift = cfg.drift_sign * frame_coords(frame, rad.log) / tau
                if run_bm:
                    _, eta, _ = manifold.radial_terms(x, v, rad)
                    inc = bm_increment(rad.r, tau, eta, rad.band, dt)
                    broken = alive & ~np.isfinite(inc)
                    if broken.any():
                        failed[broken] = k
                        logger.warning(f"⚠️ {int(broken.sum())} path(s) hit a conjugate point at step {k}")
                        alive = failed < 0
                    log_phi_bm += np.where(alive, inc, 0.0)
                    eta_accum += np.where(alive & ~rad.band, eta * dt, 0.0)
                local_time += np.where(rad.band & alive, dt, 0.0)
            drift, over = cap_drift(drift, cfg.drift_cap)
            capped += (over & alive).astype(int)

            if run_general:
                _, s_inv, a_inv = parts(t, z)
                d_a = dispersion_derivative(spec, t, z)
            z_prev = z
            dZ, dW = driver_increment(spec, t, z, dt, normals[:, k, :])
            c = dZ + drift * dt
            x_new, frame_new = manifold.develop(x, frame, c)
            z_new = z + c

            bad = ~(
                np.all(np.isfinite(x_new.reshape(n, -1)), axis=-1)
                & np.all(np.isfinite(frame_new.reshape(n, -1)), axis=-1)
                & np.all(np.isfinite(z_new), axis=-1)
            )
            newly = alive & bad
            if newly.any():
                failed[newly] = k
                logger.warning(f"⚠️ {int(newly.sum())} path(s) produced non-finite states at step {k}")
            alive = failed < 0
            x = np.where(alive.reshape((n,) + point_axes), x_new, x)
            frame = np.where(alive[:, None, None], frame_new, frame)
            z = np.where(alive[:, None], z_new, z)

            if track_radial:
                step_len = norm(c)
                hint = None
                if manifold.uses_hint:
                    due = (
                        rad.band
                        | (cut_estimate - step_len < settings.SURFACE_RECHECK_MARGIN)
                        | ((k + 1) % settings.SURFACE_RECHECK_EVERY == 0)
                    )
                    hint = np.where(due[:, None], np.nan, rad.log)
                rad_next = manifold.radial(x, v, hint=hint)
                cut_estimate = np.where(np.isnan(rad_next.dist_to_cut), cut_estimate - step_len, rad_next.dist_to_cut)
                xi_next = _unit_radial(rad_next, frame)

                crossed = (
                    (np.sum(xi * xi_next, axis=-1) < 0.0)
                    & (rad.r + rad_next.r > 2.0 * step_len)
                    & ~rad.band
                    & ~rad_next.band
                ) | (rad_next.band & ~rad.band)
                crossings += (crossed & alive).astype(int)

                if run_general:
                    _, s_inv_next, a_inv_next = parts(times[k + 1], z)
                    dlog, rem = general_increment(
                        rad.r, xi, z_prev, tau, rad_next.r, xi_next, z, tau_next, dW, dt,
                        s_inv, s_inv_next, a_inv, a_inv_next, dA=d_a, skip=rad.band | rad_next.band,
                    )
                    broken = alive & ~np.isfinite(dlog)
                    if broken.any():
                        failed[broken] = k
                        logger.warning(f"⚠️ {int(broken.sum())} path(s) produced non-finite likelihood at step {k}")
                        alive = failed < 0
                    log_phi_gen += np.where(alive, dlog, 0.0)
                    remainder += np.where(alive, rem, 0.0)

                if keep_radial:
                    out["radial_drive"][:, k] = np.sum(xi * c, axis=-1)
                    out["radials"][:, k + 1] = rad_next.r
                    out["log_phi_partial"][:, k + 1] = log_phi_gen if mode == "general" else log_phi_bm
                rad = rad_next

            if full:
                out["states"][:, k + 1] = x
                out["frames"][:, k + 1] = frame
                out["increments"][:, k] = c

    tau_last = T - times[-1]
    if rad is None:
        rad = manifold.radial(x, v)
    out["terminal_states"] = x
    out["terminal_radials"] = rad.r
    out["log_psi"] = -rad.r ** 2 / (2.0 * tau_last)
    out["log_phi"] = log_phi_gen if mode == "general" else log_phi_bm
    if run_general:
        _, s_inv, _ = parts(times[-1], z)
        out["log_phi_general"] = log_phi_gen
        out["log_psi_general"] = -0.5 * g_batch(rad.r, _unit_radial(rad, frame), tau_last, s_inv)
        out["expansion_remainder"] = remainder
        if mode == "general":
            out["log_psi"] = out["log_psi_general"]
    out["eta_accum"] = eta_accum
    out["local_time"] = local_time
    out["cut_crossings"] = crossings
    out["capped_steps"] = capped
    out["failed_steps"] = failed
    return out


_MERGED = (
    "terminal_states", "terminal_radials", "log_phi", "log_psi", "cut_crossings", "capped_steps",
    "local_time", "eta_accum", "failed_steps", "log_phi_general", "log_psi_general",
    "expansion_remainder", "states", "frames", "increments", "radials", "radial_drive", "log_phi_partial",
)


def _rows(arr: np.ndarray, n: int) -> np.ndarray:
    """Broadcast a single point (or frame) to n rows."""
    return np.repeat(arr, n, axis=0) if arr.shape[0] == 1 and n != 1 else arr


def run_ensemble(
    cfg: BridgeConfig,
    spec: Optional[DriverSpec] = None,
    path_indices: Optional[Sequence[int]] = None,
    starts: Optional[np.ndarray] = None,
    targets: Optional[np.ndarray] = None,
    start_frames: Optional[np.ndarray] = None,
) -> BridgeEnsemble:
    """Simulate the ensemble without raising on failed rows.

    ``starts``, ``targets`` and ``start_frames`` override the config points
    with one internal point (or frame) per path.
    """
    manifold = get_manifold(cfg.manifold_id)
    spec = spec or DriverSpec.brownian(manifold.dim)
    if spec.dimension != manifold.dim:
        raise UsageError(f"driver dimension {spec.dimension} differs from manifold dimension {manifold.dim}")
    mode = resolve_likelihood(cfg, spec)
    indices = np.arange(cfg.paths) if path_indices is None else np.asarray(path_indices, dtype=int)
    n = indices.size
    if n < 1:
        raise UsageError("an ensemble needs at least one path")

    if starts is None:
        starts = manifold.to_internal(cfg.start)
        manifold.validate_point(starts)
    if targets is None:
        targets = manifold.to_internal(cfg.target)
        manifold.validate_point(targets)
    starts, targets = _rows(starts, n), _rows(targets, n)
    frames = manifold.default_frame(starts) if start_frames is None else _rows(start_frames, n)
    times = time_grid(cfg.T, cfg.steps, cfg.time_grid)

    chunk = cfg.chunk_size or settings.CHUNK_SIZE
    workers = cfg.workers or settings.WORKERS
    bounds = [(lo, min(lo + chunk, n)) for lo in range(0, n, chunk)]

    def job(bound):
        lo, hi = bound
        return _run_chunk(manifold, cfg, spec, indices[lo:hi], starts[lo:hi], targets[lo:hi], frames[lo:hi], times, mode)

    started = time.perf_counter()
    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, bounds))
    else:
        parts = [job(b) for b in bounds]
    duration_ms = (time.perf_counter() - started) * 1000.0

    merged = {key: np.concatenate([p[key] for p in parts], axis=0) for key in _MERGED if key in parts[0]}
    ensemble = BridgeEnsemble(
        manifold_id=manifold.manifold_id,
        config=cfg,
        times=times,
        path_indices=indices,
        duration_ms=duration_ms,
        **merged,
    )
    log_ensemble_run(
        manifold_id=manifold.manifold_id,
        paths=n,
        steps=cfg.steps,
        duration_ms=duration_ms,
        guided=cfg.guided,
        failures=int(np.sum(~ensemble.ok)),
        cut_crossings=int(ensemble.cut_crossings.sum()),
        capped_steps=int(ensemble.capped_steps.sum()),
    )
    return ensemble


def _failures(ensemble: BridgeEnsemble) -> List[PathError]:
    return [
        PathError(f"non-finite value in path {int(ensemble.path_indices[i])}", path_index=int(ensemble.path_indices[i]),
                  step=int(ensemble.failed_steps[i]))
        for i in np.flatnonzero(~ensemble.ok)
    ]


def sample_ensemble(cfg: BridgeConfig, spec: Optional[DriverSpec] = None, **overrides) -> BridgeEnsemble:
    """Simulate paths 0..M-1; any failed path raises EnsembleError carrying the partial ensemble."""
    ensemble = run_ensemble(cfg, spec, **overrides)
    failures = _failures(ensemble)
    if failures:
        raise EnsembleError(failures, ensemble=ensemble)
    return ensemble


def simulate_path(cfg: BridgeConfig, spec: Optional[DriverSpec] = None, path_index: int = 0) -> BridgePath:
    ensemble = run_ensemble(cfg, spec, path_indices=[path_index])
    failures = _failures(ensemble)
    if failures:
        raise failures[0]
    return ensemble[0]


def sample_endpoints(cfg: BridgeConfig, spec: Optional[DriverSpec] = None) -> np.ndarray:
    """Time-T endpoints of unconditioned developments started at cfg.start.

    Runs N + 1 grid times on the stretched horizon T (N + 1) / N so that the
    last grid time is T itself.
    """
    plain = cfg.model_copy(update={
        "guided": False,
        "likelihood": "none",
        "record": "terminal",
        "target": cfg.start,
        "time_grid": "uniform",
        "steps": cfg.steps + 1,
        "T": cfg.T * (cfg.steps + 1) / cfg.steps,
    })
    ensemble = sample_ensemble(plain, spec)
    return ensemble.terminal_states
