"""Girsanov weights for guided bridges.

Two accumulators are provided. The Brownian one integrates
(r / (T - t)) * d_r log Theta^(-1/2) along the path. The general one works
for any non-degenerate driver through g(t, r, z, xi) = r^2/(T-t) |sigma^-1 xi|^2:

    -2 dlog phi = dg + E dt - 2 <b, dW> - |dW|^2 / (T - t_next)

with b = sigma^-1 xi r / (T - t) and E = |b|^2. The increment of g is taken
exactly from the geometry; its Ito expansion through GFunctionTerms is kept
only to report the product-rule remainder. Steps touching the cut band
contribute nothing to either accumulator (the local time term is omitted).
"""

from typing import Dict, Optional, Tuple

import numpy as np

from app.core.config import settings
from app.core.exceptions import DriverError, LikelihoodError, UsageError
from app.models.bridge import BridgePath, DriverSpec
from app.models.geometry import ManifoldPoint
from app.models.likelihood import GeneralStep, GFunctionTerms, LikelihoodState, LikelihoodSummary
from app.utils.linalg import norm


def dispersion_parts(spec: DriverSpec, t: float, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """sigma, sigma^-1 and A = (sigma sigma^T)^-1 on a batch of driver states."""
    try:
        sigma = spec.sigma(t, z)
    except Exception as exc:
        raise DriverError(f"dispersion evaluation failed at t={t:g}: {exc}")
    if sigma.shape != (z.shape[0], spec.dimension, spec.dimension) or not np.all(np.isfinite(sigma)):
        raise DriverError(f"dispersion returned an invalid array at t={t:g}", shape=list(sigma.shape))
    cond = np.linalg.cond(sigma)
    if np.any(~np.isfinite(cond) | (cond >= settings.SIGMA_COND_MAX)):
        raise DriverError(
            f"dispersion is singular or ill-conditioned at t={t:g}",
            condition=float(np.nanmax(np.where(np.isfinite(cond), cond, np.inf))),
        )
    sigma_inv = np.linalg.inv(sigma)
    return sigma, sigma_inv, np.swapaxes(sigma_inv, -1, -2) @ sigma_inv


def dispersion_derivative(spec: DriverSpec, t: float, z: np.ndarray) -> np.ndarray:
    """dA/dz_j as (B, d, d, d), derivative index last."""
    n, d = z.shape
    if spec.is_constant_sigma:
        return np.zeros((n, d, d, d))
    if spec.dispersion_dz is not None:
        return np.asarray(spec.dispersion_dz(t, z), dtype=float)
    out = np.empty((n, d, d, d))
    for j in range(d):
        h = 1e-6 * np.maximum(1.0, np.abs(z[:, j]))
        zp, zm = z.copy(), z.copy()
        zp[:, j] += h
        zm[:, j] -= h
        _, _, a_plus = dispersion_parts(spec, t, zp)
        _, _, a_minus = dispersion_parts(spec, t, zm)
        out[..., j] = (a_plus - a_minus) / (2.0 * h)[:, None, None]
    return out


def g_batch(r: np.ndarray, xi: np.ndarray, tau: np.ndarray, sigma_inv: np.ndarray) -> np.ndarray:
    s = np.einsum("bij,bj->bi", sigma_inv, xi)
    return r ** 2 / tau * np.sum(s * s, axis=-1)


def g_terms_batch(r: np.ndarray, xi: np.ndarray, tau: np.ndarray, sigma_inv: np.ndarray, A: np.ndarray, dA: np.ndarray) -> Dict[str, np.ndarray]:
    a_xi = np.einsum("bij,bj->bi", A, xi)
    q = np.sum(xi * a_xi, axis=-1)
    s = np.einsum("bij,bj->bi", sigma_inv, xi)
    r2 = r ** 2
    return {
        "g": r2 / tau * np.sum(s * s, axis=-1),
        "q": q,
        "E": r2 * np.sum(s * s, axis=-1) / tau ** 2,
        "F": 2.0 * r * q / tau,
        "G": 2.0 * q / tau,
        "H": 2.0 * (r / tau)[:, None] * np.einsum("bi,bilj,bl->bj", xi, dA, xi),
        "I": 4.0 * (r / tau)[:, None] * a_xi,
        "J": 2.0 * (r2 / tau)[:, None] * a_xi,
        "J2": 2.0 * (r2 / tau)[:, None, None] * A,
        "K": 2.0 * (r2 / tau)[:, None, None] * np.einsum("bilj,bl->bij", dA, xi),
        "A": A,
    }


def expansion_increment(terms: Dict[str, np.ndarray], r: np.ndarray, tau: np.ndarray, tau_next: np.ndarray,
                        A_next: np.ndarray, dr: np.ndarray, dxi: np.ndarray, dz: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """Ito expansion of dg with discrete brackets (products of increments)."""
    r2 = r ** 2
    time_part = r2 * terms["q"] * (1.0 / tau_next - 1.0 / tau)
    a_part = r2 / tau_next * np.einsum("bi,bij,bj->b", xi, A_next - terms["A"], xi)
    first = terms["F"] * dr + np.sum(terms["J"] * dxi, axis=-1)
    second = 0.5 * (terms["G"] * dr ** 2 + np.einsum("bi,bij,bj->b", dxi, terms["J2"], dxi))
    mixed = (
        np.sum(terms["H"] * dz, axis=-1) * dr
        + np.sum(terms["I"] * dxi, axis=-1) * dr
        + np.einsum("bi,bij,bj->b", dxi, terms["K"], dz)
    )
    return time_part + a_part + first + second + mixed


def general_increment(
    r: np.ndarray, xi: np.ndarray, z: np.ndarray, tau: np.ndarray,
    r_next: np.ndarray, xi_next: np.ndarray, z_next: np.ndarray, tau_next: np.ndarray,
    dW: np.ndarray, dt: np.ndarray,
    sigma_inv: np.ndarray, sigma_inv_next: np.ndarray, A: np.ndarray, A_next: np.ndarray,
    dA: Optional[np.ndarray] = None, skip: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Batched (dlog phi, expansion remainder) for one guided step.

    Implements -2 dlog phi = dg + |b|^2 dt - 2 <b, dW> - |dW|^2 / tau_next with
    b = sigma^-1 xi r / tau, which is exact for constant sigma in flat space.
    The term-by-term Ito expansion of dg only feeds the remainder diagnostic.
    """
    g_now = g_batch(r, xi, tau, sigma_inv)
    g_next = g_batch(r_next, xi_next, tau_next, sigma_inv_next)
    b = (r / tau)[:, None] * np.einsum("bij,bj->bi", sigma_inv, xi)
    energy = np.sum(b * b, axis=-1)
    minus_two = (g_next - g_now) + energy * dt - 2.0 * np.sum(b * dW, axis=-1) - np.sum(dW * dW, axis=-1) / tau_next
    dlog_phi = -0.5 * minus_two

    if dA is None:
        dA = np.zeros(A.shape + (A.shape[-1],))
    terms = g_terms_batch(r, xi, tau, sigma_inv, A, dA)
    remainder = (g_next - g_now) - expansion_increment(terms, r, tau, tau_next, A_next, r_next - r, xi_next - xi, z_next - z, xi)

    if skip is not None:
        dlog_phi = np.where(skip, 0.0, dlog_phi)
        remainder = np.where(skip, 0.0, remainder)
    return dlog_phi, remainder


def bm_increment(r: np.ndarray, tau: np.ndarray, eta: np.ndarray, band: np.ndarray, dt: np.ndarray) -> np.ndarray:
    return np.where(band, 0.0, r / tau * eta * dt)


# public operations -----------------------------------------------------


def _check_time(t: float, T: float) -> float:
    if not t < T:
        raise UsageError(f"t = {t:g} must be below the horizon T = {T:g}")
    return T - t


def _row(values, d: Optional[int] = None) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(values, dtype=float))
    if d is not None and arr.shape[-1] != d:
        raise UsageError(f"expected {d} components, got {arr.shape[-1]}")
    return arr


def g_value(t: float, T: float, r: float, z, xi, spec: DriverSpec) -> float:
    tau = _check_time(t, T)
    zr, xr = _row(z, spec.dimension), _row(xi, spec.dimension)
    _, sigma_inv, _ = dispersion_parts(spec, t, zr)
    return float(g_batch(np.array([r]), xr, np.array([tau]), sigma_inv)[0])


def g_terms(t: float, T: float, r: float, z, xi, spec: DriverSpec) -> GFunctionTerms:
    tau = _check_time(t, T)
    zr, xr = _row(z, spec.dimension), _row(xi, spec.dimension)
    _, sigma_inv, A = dispersion_parts(spec, t, zr)
    dA = dispersion_derivative(spec, t, zr)
    terms = g_terms_batch(np.array([r]), xr, np.array([tau]), sigma_inv, A, dA)
    return GFunctionTerms(**{k: (float(v[0]) if v.ndim == 1 else v[0].tolist()) for k, v in terms.items()})


def log_psi(t: float, T: float, r: float, spec: Optional[DriverSpec] = None, xi=None, z=None) -> float:
    """-r^2 / (2 (T - t)) for Brownian drivers, -g/2 otherwise."""
    tau = _check_time(t, T)
    if spec is None or spec.is_brownian or xi is None:
        return -(r ** 2) / (2.0 * tau)
    z = np.zeros(spec.dimension) if z is None else z
    return -0.5 * g_value(t, T, r, z, xi, spec)


def update_log_phi_bm(state: LikelihoodState, dt: float, manifold, x: ManifoldPoint, v: ManifoldPoint) -> LikelihoodState:
    """Advance the Brownian accumulator by one step of length dt taken at x."""
    from app.services.manifolds import get_manifold

    m = get_manifold(manifold) if isinstance(manifold, str) else manifold
    tau = _check_time(state.t, state.T)
    px, pv = m.to_internal(x.coords), m.to_internal(v.coords)
    rad = m.radial(px, pv)
    _, eta, _ = m.radial_terms(px, pv, rad)
    band = bool(rad.band[0])
    inc = float(bm_increment(rad.r, np.array([tau]), eta, rad.band, np.array([dt]))[0])
    return state.model_copy(
        update={
            "t": state.t + dt,
            "r": float(rad.r[0]),
            "log_phi": state.log_phi + inc,
            "log_psi": -float(rad.r[0]) ** 2 / (2.0 * tau),
            "eta_accum": state.eta_accum + (0.0 if band else float(eta[0]) * dt),
            "local_time_accum": state.local_time_accum + (dt if band else 0.0),
        }
    )


def update_log_phi_general(state: LikelihoodState, step: GeneralStep, spec: DriverSpec, step_index: int = -1) -> LikelihoodState:
    """Advance the general accumulator by one guided step (see ``general_increment`` for the identity)."""
    tau = _check_time(state.t, state.T)
    tau_next = state.T - (state.t + step.dt)
    if tau_next <= 0.0:
        raise UsageError("the general accumulator stops before the horizon")
    d = spec.dimension
    z, z_next = _row(state.z, d), _row(step.z_next, d)
    xi, xi_next = _row(state.xi, d), _row(step.xi_next, d)
    dW = _row(step.dW, d)
    _, s_inv, A = dispersion_parts(spec, state.t, z)
    _, s_inv_next, A_next = dispersion_parts(spec, state.t + step.dt, z_next)
    dA = dispersion_derivative(spec, state.t, z)
    skip = np.array([norm(xi)[0] == 0.0 or norm(xi_next)[0] == 0.0])
    dlog_phi, remainder = general_increment(
        np.array([state.r]), xi, z, np.array([tau]),
        np.array([step.r_next]), xi_next, z_next, np.array([tau_next]),
        dW, np.array([step.dt]), s_inv, s_inv_next, A, A_next, dA=dA, skip=skip,
    )
    if not np.isfinite(dlog_phi[0]):
        raise LikelihoodError("non-finite likelihood increment", step=step_index)
    g_next = g_batch(np.array([step.r_next]), xi_next, np.array([tau_next]), s_inv_next)[0]
    return state.model_copy(
        update={
            "t": state.t + step.dt,
            "r": step.r_next,
            "z": z_next[0].tolist(),
            "xi": xi_next[0].tolist(),
            "log_phi": state.log_phi + float(dlog_phi[0]),
            "log_psi": -0.5 * float(g_next),
            "expansion_remainder": state.expansion_remainder + float(remainder[0]),
        }
    )


def log_radon_nikodym_bm(path: BridgePath, upto: Optional[int] = None) -> float:
    """log dQ/dP of the guided law against Brownian motion up to grid index ``upto``.

    Evaluated from the stored radials and radial drives; the drive is the
    developed increment projected on the unit radial direction.
    """
    if path.radials is None or path.radial_drive is None:
        raise LikelihoodError("path was recorded without radial increments", step=-1)
    times = np.asarray(path.times)
    T = float(path.horizon)
    k = len(path.radial_drive) if upto is None else int(upto)
    if not 0 <= k <= len(path.radial_drive):
        raise UsageError(f"upto must lie in [0, {len(path.radial_drive)}]")
    r = np.asarray(path.radials[:k])
    tau = T - times[:k]
    dt = np.diff(times)[:k]
    drive = np.asarray(path.radial_drive[:k])
    return float(-np.sum(r / tau * drive) - 0.5 * np.sum(r ** 2 / tau ** 2 * dt))


def decomposition_residual(path: BridgePath, k: int, dimension: int) -> float:
    """log D_t - (log psi_t + r0^2/(2T) + (d/2) log(T/(T-t)) - log phi_t) at grid index k."""
    if path.log_phi_partial is None:
        raise LikelihoodError("path was recorded without partial likelihoods", step=k)
    T = float(path.horizon)
    t = float(path.times[k])
    tau = T - t
    r0, rk = float(path.radials[0]), float(path.radials[k])
    log_d = log_radon_nikodym_bm(path, upto=k)
    rhs = -rk ** 2 / (2.0 * tau) + r0 ** 2 / (2.0 * T) + 0.5 * dimension * np.log(T / tau) - float(path.log_phi_partial[k])
    return log_d - rhs


def l2_radial_bound(r0: float, nu: float, lam: float, t: float, T: float) -> float:
    """Upper bound on E[r^2(Y_t)] when the generator satisfies L r^2 <= nu + lam r^2."""
    if not 0.0 < t < T:
        raise UsageError("the radial bound needs 0 < t < T")
    if nu < 1.0 or lam < 0.0:
        raise UsageError("the radial bound needs nu >= 1 and lambda >= 0")
    return (r0 ** 2 + nu * t * (t / (T - t))) * ((T - t) / t) ** 2 * np.exp(lam * t)


def likelihood_summary(path: BridgePath) -> LikelihoodSummary:
    extra = {"local_time": float(path.local_time), "capped_steps": float(path.capped_steps)}
    if path.expansion_remainder is not None:
        extra["expansion_remainder"] = float(path.expansion_remainder)
    return LikelihoodSummary(
        log_phi=float(path.log_phi),
        log_psi=float(path.log_psi),
        cut_crossings=int(path.cut_crossings),
        eta_accum=float(path.eta_accum),
        log_phi_general=None if path.log_phi_general is None else float(path.log_phi_general),
        extra=extra,
    )
