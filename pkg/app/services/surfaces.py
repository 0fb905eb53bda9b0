"""Numeric geometry for embedded surfaces without closed forms.

Surfaces are given by an implicit equation F(p) = 0 in R^3. Geodesics solve
p'' = -(u^T H u / |grad F|^2) grad F with a fixed-step RK4 scheme, parallel
transport uses the same connection, and the Log map is found by batched
Gauss-Newton shooting over several starting guesses (winding classes on the
torus, sphere-map guesses on the ellipsoid, cached and engine-supplied warm
starts). Gaussian curvature comes from the bordered Hessian and feeds the
scalar Jacobi equation that yields Theta and its radial derivative.
"""

import math
from typing import List, NamedTuple, Optional, Sequence, Union

import numpy as np
from loguru import logger
from scipy.optimize import least_squares

from app.core.config import settings
from app.core.exceptions import (
    ConjugatePointError,
    DegenerateMetricError,
    GeodesicConvergenceError,
    UsageError,
)
from app.db.geodesic_cache import geodesic_cache
from app.models.surface import GeodesicSolution
from app.services.manifolds import Manifold, Radial
from app.utils.linalg import TWO_PI, dot, frame_coords, from_frame, norm, wrap_centered, wrap_positive


# endpoint residual accepted as a converged shooting solution
CONVERGED_TOL = 1e-8
# initial velocities closer than this (relative to length) are the same geodesic class
CLASS_TOL = 1e-4


class Flow(NamedTuple):
    p: np.ndarray
    u: np.ndarray
    vecs: Optional[np.ndarray]
    path: Optional[np.ndarray]
    velocity: Optional[np.ndarray]


class ShootResult(NamedTuple):
    velocity: np.ndarray
    residual: np.ndarray
    converged: np.ndarray


class SearchResult(NamedTuple):
    velocity: np.ndarray
    length: np.ndarray
    residual: np.ndarray
    converged: np.ndarray
    near_cut: np.ndarray
    dist_to_cut: np.ndarray
    candidates_converged: np.ndarray


class ImplicitSurface(Manifold):
    dim = 2
    tangent_size = 3
    public_size = 3
    point_shape = (3,)
    uses_hint = True
    periodic = (False, False)
    cut_radius = np.inf
    max_length = np.inf

    # implicit equation -------------------------------------------------

    def level(self, p: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad(self, p: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def hess(self, p: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    # chart -------------------------------------------------------------

    def embed(self, q: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def chart_of(self, p: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def chart_jacobian(self, q: np.ndarray) -> np.ndarray:
        """Columns d embed / d q_i, shape (B, 3, 2)."""
        raise NotImplementedError

    def _initial_guesses(self, x: np.ndarray, v: np.ndarray) -> List[np.ndarray]:
        return []

    def _rough_projection(self, p: np.ndarray) -> np.ndarray:
        return p

    # manifold interface ------------------------------------------------

    def _from_public(self, arr):
        return arr.copy()

    def validate_point(self, p):
        super().validate_point(p)
        scale = np.maximum(norm(self.grad(p)), 1e-12)
        if np.any(np.abs(self.level(p)) / scale > 1e-8):
            raise UsageError(f"point is not on {self.manifold_id}")

    def validate_tangent(self, p, u):
        super().validate_tangent(p, u)
        n = self.grad(p)
        if np.any(np.abs(dot(u, n)) / norm(n) > 1e-9):
            raise UsageError(f"vector is not tangent to {self.manifold_id}")

    def named_point(self, text: str) -> Optional[np.ndarray]:
        if text.startswith("chart:"):
            from app.utils.formatting import parse_floats

            q = np.atleast_2d(parse_floats(text[len("chart:"):]))
            if q.shape[-1] != 2:
                raise UsageError("chart points on surfaces have two coordinates")
            return self.embed(q)
        return None

    def project(self, p):
        p = self._rough_projection(np.array(p, dtype=float))
        for _ in range(settings.SURFACE_NEWTON_MAX_ITERS):
            f = self.level(p)
            if np.max(np.abs(f), initial=0.0) < settings.SURFACE_NEWTON_TOL:
                break
            g = self.grad(p)
            p = p - (f / np.sum(g * g, axis=-1))[:, None] * g
        return p

    def tangent_project(self, x, u):
        n = self.grad(x)
        n = n / norm(n)[:, None]
        return u - dot(u, n)[:, None] * n

    def default_frame(self, x):
        n = x.shape[0]
        normal = self.grad(x)
        drop = np.argmax(np.abs(normal), axis=-1)
        keep = np.arange(3)[None, :] != drop[:, None]
        eye = np.broadcast_to(np.eye(3), (n, 3, 3))
        return self.reframe(x, eye[keep].reshape(n, 2, 3))

    def gaussian_curvature(self, p: np.ndarray) -> np.ndarray:
        g = self.grad(p)
        bordered = np.zeros((p.shape[0], 4, 4))
        bordered[:, :3, :3] = self.hess(p)
        bordered[:, :3, 3] = g
        bordered[:, 3, :3] = g
        return -np.linalg.det(bordered) / np.sum(g * g, axis=-1) ** 2

    def metric(self, q: np.ndarray) -> np.ndarray:
        jac = self.chart_jacobian(q)
        return np.swapaxes(jac, -1, -2) @ jac

    # geodesic flow -----------------------------------------------------

    def _rhs(self, p, u, z):
        g = self.grad(p)
        gg = np.sum(g * g, axis=-1)
        hu = np.einsum("bij,bj->bi", self.hess(p), u)
        acc = -(np.sum(u * hu, axis=-1) / gg)[:, None] * g
        if z is None:
            return u, acc, None
        zhu = np.einsum("bki,bi->bk", z, hu)
        return u, acc, -(zhu / gg[:, None])[:, :, None] * g[:, None, :]

    def substeps(self, w: np.ndarray) -> int:
        longest = float(np.max(norm(w), initial=0.0))
        return max(1, int(math.ceil(longest / settings.SURFACE_STEP)))

    def _flow(
        self,
        x: np.ndarray,
        w: np.ndarray,
        vecs: Optional[np.ndarray] = None,
        steps: Optional[int] = None,
        record: bool = False,
    ) -> Flow:
        """RK4 for the geodesic t -> exp_x(t w), t in [0, 1], carrying ``vecs`` along."""
        steps = steps or self.substeps(w)
        h = 1.0 / steps
        p, u, z = np.array(x, dtype=float), np.array(w, dtype=float), None if vecs is None else np.array(vecs, dtype=float)
        path = [p] if record else None
        velocity = [u] if record else None

        def shift(state, deriv, scale):
            return tuple(None if s is None else s + scale * d for s, d in zip(state, deriv))

        for _ in range(steps):
            state = (p, u, z)
            k1 = self._rhs(*state)
            k2 = self._rhs(*shift(state, k1, 0.5 * h))
            k3 = self._rhs(*shift(state, k2, 0.5 * h))
            k4 = self._rhs(*shift(state, k3, h))
            p = p + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0])
            u = u + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1])
            if z is not None:
                z = z + h / 6.0 * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2])
            if record:
                path.append(p)
                velocity.append(u)

        p = self.project(p)
        speed = norm(w)
        u = self.tangent_project(p, u)
        u_norm = norm(u)
        u = np.where((u_norm > 0.0)[:, None], u * (speed / np.where(u_norm > 0.0, u_norm, 1.0))[:, None], 0.0)
        if z is not None:
            z = np.stack([self.tangent_project(p, z[:, i, :]) for i in range(z.shape[1])], axis=1)
        if record:
            path[-1] = p
            velocity[-1] = u
            return Flow(p, u, z, np.stack(path, axis=1), np.stack(velocity, axis=1))
        return Flow(p, u, z, None, None)

    def exp(self, x, w):
        return self._flow(x, w).p

    def transport(self, x, w, vecs):
        return self._flow(x, w, vecs=vecs).vecs

    def develop(self, x, frame, c):
        flow = self._flow(x, from_frame(frame, c), vecs=frame)
        return flow.p, self.reframe(flow.p, flow.vecs)

    # shooting ----------------------------------------------------------

    def _endpoint(self, x, frame, c, steps):
        return self._flow(x, from_frame(frame, c), steps=steps).p

    def shoot(self, x: np.ndarray, v: np.ndarray, w0: np.ndarray) -> ShootResult:
        """Gauss-Newton on frame coordinates of the initial velocity, with step halving."""
        frame = self.default_frame(x)
        c = frame_coords(frame, self.tangent_project(x, w0))
        steps = self.substeps(c) + 1
        res = self._endpoint(x, frame, c, steps) - v
        err = norm(res)
        active = np.isfinite(err) & (err > settings.SURFACE_NEWTON_TOL)

        for _ in range(settings.SURFACE_NEWTON_MAX_ITERS):
            if not active.any():
                break
            idx = np.flatnonzero(active)
            xi, fi, vi = x[idx], frame[idx], v[idx]
            ci, ri, ei = c[idx], res[idx], err[idx]
            steps = self.substeps(ci) + 1

            jac = np.empty((idx.size, 3, 2))
            h = 1e-6 * np.maximum(1.0, norm(ci))
            for j in range(2):
                cp = ci.copy()
                cp[:, j] += h
                jac[:, :, j] = (self._endpoint(xi, fi, cp, steps) - vi - ri) / h[:, None]
            jtj = np.swapaxes(jac, -1, -2) @ jac + 1e-14 * np.eye(2)
            delta = -np.linalg.solve(jtj, np.einsum("bij,bi->bj", jac, ri)[..., None])[..., 0]

            lam = np.ones(idx.size)
            improved = np.zeros(idx.size, dtype=bool)
            for _ in range(8):
                pending = np.flatnonzero(~improved)
                if pending.size == 0:
                    break
                trial = ci[pending] + lam[pending, None] * delta[pending]
                tr = self._endpoint(xi[pending], fi[pending], trial, steps) - vi[pending]
                te = np.where(norm(trial) > self.max_length, np.inf, norm(tr))
                ok = np.isfinite(te) & (te < ei[pending])
                done = pending[ok]
                ci[done], ri[done], ei[done] = trial[ok], tr[ok], te[ok]
                improved[done] = True
                lam[pending[~ok]] *= 0.5

            c[idx], res[idx], err[idx] = ci, ri, ei
            active[idx[~improved]] = False
            active &= err > settings.SURFACE_NEWTON_TOL

        return ShootResult(from_frame(frame, c), err, np.isfinite(err) & (err < CONVERGED_TOL))

    def _least_squares(self, x: np.ndarray, v: np.ndarray, w0: np.ndarray):
        """Single-row fallback through scipy's trust-region solver."""
        x, v = x[None, :], v[None, :]
        frame = self.default_frame(x)
        c0 = frame_coords(frame, self.tangent_project(x, w0[None, :]))[0]
        steps = self.substeps(c0[None, :]) + 1
        sol = least_squares(
            lambda c: (self._endpoint(x, frame, c[None, :], steps) - v)[0],
            c0,
            xtol=1e-14,
            ftol=1e-14,
            gtol=1e-14,
            max_nfev=200,
        )
        w = from_frame(frame, sol.x[None, :])[0]
        return w, float(np.linalg.norm(sol.fun))

    def search(self, x: np.ndarray, v: np.ndarray, use_cache: bool = True) -> SearchResult:
        """Full candidate search for the minimizing geodesic from each x to each v."""
        n = x.shape[0]
        guesses = self._initial_guesses(x, v)
        if use_cache:
            guesses.append(geodesic_cache.lookup_rows(self.manifold_id, x, v))
        stacked = np.stack(guesses, axis=1)
        rows = np.repeat(np.arange(n), stacked.shape[1])
        flat = stacked.reshape(-1, 3)
        valid = np.all(np.isfinite(flat), axis=-1)
        rows, flat = rows[valid], flat[valid]
        shot = self.shoot(x[rows], v[rows], flat)
        lengths = norm(shot.velocity)

        velocity = np.zeros((n, 3))
        length = np.zeros(n)
        residual = np.full(n, np.inf)
        converged = np.zeros(n, dtype=bool)
        near_cut = np.zeros(n, dtype=bool)
        dist_to_cut = np.full(n, np.inf)
        count = np.zeros(n, dtype=int)

        for i in range(n):
            mine = np.flatnonzero(rows == i)
            good = mine[shot.converged[mine]]
            count[i] = good.size
            if good.size == 0:
                if mine.size == 0:
                    continue
                start = mine[np.argmin(shot.residual[mine])]
                w, res = self._least_squares(x[i], v[i], shot.velocity[start])
                velocity[i], length[i], residual[i] = w, np.linalg.norm(w), res
                if res < CONVERGED_TOL:
                    converged[i] = True
                    count[i] = 1
                    logger.warning(f"⚠️ Geodesic shooting fell back to least squares on {self.manifold_id}")
                continue
            order = good[np.argsort(lengths[good], kind="stable")]
            best = order[0]
            velocity[i], length[i], residual[i] = shot.velocity[best], lengths[best], shot.residual[best]
            converged[i] = True
            for other in order[1:]:
                if np.linalg.norm(shot.velocity[other] - shot.velocity[best]) > CLASS_TOL * max(1.0, lengths[best]):
                    gap = lengths[other] - lengths[best]
                    near_cut[i] = gap < settings.EPS_CUT
                    dist_to_cut[i] = 0.5 * gap
                    break

        if use_cache:
            geodesic_cache.store_rows(self.manifold_id, x, v, velocity, converged & ~near_cut)
        return SearchResult(velocity, length, residual, converged, near_cut, dist_to_cut, count)

    def radial(self, x, v, hint=None):
        n = x.shape[0]
        r = np.zeros(n)
        log = np.zeros((n, 3))
        dist_to_cut = np.full(n, np.inf)
        unresolved = np.zeros(n, dtype=bool)
        todo = np.ones(n, dtype=bool)

        if hint is not None:
            hinted = np.flatnonzero(np.all(np.isfinite(hint), axis=-1))
            if hinted.size:
                shot = self.shoot(x[hinted], v[hinted], hint[hinted])
                done = hinted[shot.converged]
                log[done] = shot.velocity[shot.converged]
                r[done] = norm(log[done])
                # the caller tracks the cut distance between full searches
                dist_to_cut[done] = np.nan
                todo[done] = False

        rows = np.flatnonzero(todo)
        if rows.size:
            found = self.search(x[rows], v[rows])
            log[rows] = found.velocity
            r[rows] = found.length
            dist_to_cut[rows] = np.where(found.near_cut, 0.0, found.dist_to_cut)
            unresolved[rows] = ~found.converged
            if unresolved.any():
                logger.warning(
                    f"⚠️ No geodesic converged for {int(unresolved.sum())} row(s) on {self.manifold_id}; drift zeroed"
                )

        band = unresolved | (dist_to_cut < settings.EPS_CUT)
        log = np.where(band[:, None], 0.0, log)
        dist_to_cut = np.where(band, 0.0, dist_to_cut)
        return Radial(r, log, dist_to_cut, band)

    def distance(self, x, v):
        return self.radial(x, v).r

    # Jacobi fields -----------------------------------------------------

    def jacobi(self, x: np.ndarray, w: np.ndarray, r: np.ndarray, jacobi_steps: Optional[int] = None):
        """Solve y'' = -K y from v back to x along the geodesic exp_x(s w).

        Returns y(r), y'(r) and a flag for rows where y vanished on the way.
        """
        steps = jacobi_steps or settings.SURFACE_JACOBI_STEPS
        nodes = self._flow(x, w, steps=2 * steps, record=True).path
        curvature = self.gaussian_curvature(nodes.reshape(-1, 3)).reshape(x.shape[0], -1)[:, ::-1]
        return integrate_jacobi(curvature, r, steps)

    def radial_terms(self, x, v, rad):
        n = x.shape[0]
        theta = np.ones(n)
        eta = np.zeros(n)
        half_lap = np.full(n, 2.0)
        theta[rad.band] = np.nan
        half_lap[rad.band] = np.nan
        rows = np.flatnonzero(~rad.band & (rad.r >= 1e-8))
        if rows.size:
            r = rad.r[rows]
            y, yp, conjugate = self.jacobi(x[rows], rad.log[rows], r)
            safe_y = np.where(conjugate, 1.0, y)
            theta[rows] = np.where(conjugate, np.nan, y / r)
            eta[rows] = np.where(conjugate, 0.0, -0.5 * (yp / safe_y - 1.0 / r))
            half_lap[rows] = np.where(conjugate, np.nan, 1.0 + r * yp / safe_y)
            if conjugate.any():
                logger.warning(f"⚠️ Conjugate point on {int(conjugate.sum())} geodesic(s) of {self.manifold_id}")
        return theta, eta, half_lap


def integrate_jacobi(curvature: np.ndarray, r: np.ndarray, steps: int):
    """RK4 for y'' = -K y, y(0) = 0, y'(0) = 1 with K sampled at 2 * steps + 1 equispaced nodes."""
    h = r / steps
    y = np.zeros_like(r)
    yp = np.ones_like(r)
    conjugate = np.zeros(r.shape, dtype=bool)
    for j in range(steps):
        k0, km, k1 = curvature[:, 2 * j], curvature[:, 2 * j + 1], curvature[:, 2 * j + 2]
        a1, b1 = yp, -k0 * y
        a2, b2 = yp + 0.5 * h * b1, -km * (y + 0.5 * h * a1)
        a3, b3 = yp + 0.5 * h * b2, -km * (y + 0.5 * h * a2)
        a4, b4 = yp + h * b3, -k1 * (y + h * a3)
        y = y + h / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
        yp = yp + h / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4)
        conjugate |= y <= 0.0
    return y, yp, conjugate


class EmbeddedTorus(ImplicitSurface):
    """Torus of revolution around the z axis, chart (q1, q2) = (longitude, tube angle)."""

    periodic = (True, True)

    def __init__(self, R: float, rho: float):
        if not (R > rho > 0.0):
            raise UsageError("torus radii must satisfy R > rho > 0")
        self.R, self.rho = float(R), float(rho)
        self.manifold_id = f"torus:{self.R:g},{self.rho:g}"
        self.max_length = TWO_PI * (self.R + 2.0 * self.rho)

    def level(self, p):
        s = np.hypot(p[:, 0], p[:, 1])
        return (s - self.R) ** 2 + p[:, 2] ** 2 - self.rho ** 2

    def grad(self, p):
        s = np.hypot(p[:, 0], p[:, 1])
        k = 2.0 * (s - self.R) / s
        return np.stack([k * p[:, 0], k * p[:, 1], 2.0 * p[:, 2]], axis=-1)

    def hess(self, p):
        x, y = p[:, 0], p[:, 1]
        s = np.hypot(x, y)
        d = s - self.R
        out = np.zeros((p.shape[0], 3, 3))
        out[:, 0, 0] = 2.0 * (x * x / s ** 2 + d * y * y / s ** 3)
        out[:, 1, 1] = 2.0 * (y * y / s ** 2 + d * x * x / s ** 3)
        out[:, 0, 1] = out[:, 1, 0] = 2.0 * (x * y / s ** 2 - d * x * y / s ** 3)
        out[:, 2, 2] = 2.0
        return out

    def embed(self, q):
        q = np.atleast_2d(q)
        ring = self.R + self.rho * np.cos(q[:, 1])
        return np.stack([ring * np.cos(q[:, 0]), ring * np.sin(q[:, 0]), self.rho * np.sin(q[:, 1])], axis=-1)

    def chart_of(self, p):
        s = np.hypot(p[:, 0], p[:, 1])
        return wrap_positive(np.stack([np.arctan2(p[:, 1], p[:, 0]), np.arctan2(p[:, 2], s - self.R)], axis=-1))

    def chart_jacobian(self, q):
        q = np.atleast_2d(q)
        c1, s1, c2, s2 = np.cos(q[:, 0]), np.sin(q[:, 0]), np.cos(q[:, 1]), np.sin(q[:, 1])
        ring = self.R + self.rho * c2
        d1 = np.stack([-ring * s1, ring * c1, np.zeros_like(c1)], axis=-1)
        d2 = np.stack([-self.rho * s2 * c1, -self.rho * s2 * s1, self.rho * c2], axis=-1)
        return np.stack([d1, d2], axis=-1)

    def _rough_projection(self, p):
        s = np.hypot(p[:, 0], p[:, 1])
        radial = np.stack([s - self.R, p[:, 2]], axis=-1)
        radial = self.rho * radial / norm(radial)[:, None]
        ring = self.R + radial[:, 0]
        return np.stack([ring * p[:, 0] / s, ring * p[:, 1] / s, radial[:, 1]], axis=-1)

    def random_point(self, rng, n):
        return self.embed(rng.uniform(0.0, TWO_PI, size=(n, 2)))

    def _initial_guesses(self, x, v):
        qx, qv = self.chart_of(x), self.chart_of(v)
        dq = wrap_centered(qv - qx)
        jac = self.chart_jacobian(qx)
        guesses = []
        for k1 in (0, -1, 1):
            for k2 in (0, -1, 1):
                shifted = dq + TWO_PI * np.array([k1, k2], dtype=float)
                guesses.append(np.einsum("bij,bj->bi", jac, shifted))
        return guesses


class Ellipsoid(ImplicitSurface):
    """Ellipsoid sum x_i^2 / a_i^2 = 1, chart (q1, q2) = (polar angle, azimuth)."""

    periodic = (False, True)

    def __init__(self, a: float, b: float, c: float):
        if min(a, b, c) <= 0.0:
            raise UsageError("ellipsoid semi-axes must be positive")
        self.axes = np.array([a, b, c], dtype=float)
        self.manifold_id = f"ellipsoid:{a:g},{b:g},{c:g}"
        self.max_length = 2.0 * TWO_PI * float(self.axes.max())

    def level(self, p):
        return np.sum((p / self.axes) ** 2, axis=-1) - 1.0

    def grad(self, p):
        return 2.0 * p / self.axes ** 2

    def hess(self, p):
        return np.broadcast_to(np.diag(2.0 / self.axes ** 2), (p.shape[0], 3, 3)).copy()

    def embed(self, q):
        q = np.atleast_2d(q)
        st = np.sin(q[:, 0])
        unit = np.stack([st * np.cos(q[:, 1]), st * np.sin(q[:, 1]), np.cos(q[:, 0])], axis=-1)
        return unit * self.axes

    def chart_of(self, p):
        unit = p / self.axes
        polar = np.arccos(np.clip(unit[:, 2] / norm(unit), -1.0, 1.0))
        return np.stack([polar, wrap_positive(np.arctan2(unit[:, 1], unit[:, 0]))], axis=-1)

    def chart_jacobian(self, q):
        q = np.atleast_2d(q)
        ct, st, cp, sp = np.cos(q[:, 0]), np.sin(q[:, 0]), np.cos(q[:, 1]), np.sin(q[:, 1])
        a, b, c = self.axes
        d1 = np.stack([a * ct * cp, b * ct * sp, -c * st], axis=-1)
        d2 = np.stack([-a * st * sp, b * st * cp, np.zeros_like(st)], axis=-1)
        return np.stack([d1, d2], axis=-1)

    def named_point(self, text):
        if text in ("north", "south"):
            p = np.array([[0.0, 0.0, self.axes[2]]])
            return p if text == "north" else -p
        return super().named_point(text)

    def _rough_projection(self, p):
        return p / np.sqrt(np.sum((p / self.axes) ** 2, axis=-1))[:, None]

    def random_point(self, rng, n):
        p = rng.standard_normal((n, 3))
        return self.axes * p / norm(p)[:, None]

    def _initial_guesses(self, x, v):
        sx, sv = x / self.axes, v / self.axes
        sx = sx / norm(sx)[:, None]
        sv = sv / norm(sv)[:, None]
        theta = 2.0 * np.arctan2(norm(sx - sv), norm(sx + sv))
        u = sv - dot(sx, sv)[:, None] * sx
        nu = norm(u)
        direction = np.where((nu > 1e-12)[:, None], u / np.where(nu > 1e-12, nu, 1.0)[:, None], 0.0)
        short = self.tangent_project(x, theta[:, None] * direction * self.axes)
        long_way = self.tangent_project(x, -(TWO_PI - theta)[:, None] * direction * self.axes)
        guesses = [short, long_way]
        # near-antipodal pairs have no preferred direction
        wide = theta > np.pi - 0.5
        if wide.any():
            frame = self.default_frame(x)
            reach = (theta * float(self.axes.mean()))[:, None]
            for sign in (1.0, -1.0):
                for i in range(2):
                    guess = sign * reach * frame[:, i, :]
                    guesses.append(np.where(wide[:, None], guess, np.nan))
        return guesses


def build_surface(kind: str, params: Sequence[float]) -> ImplicitSurface:
    params = list(params)
    if kind == "torus":
        if len(params) != 2:
            raise UsageError("torus ids take two radii: torus:R,rho")
        return EmbeddedTorus(*params)
    if kind == "ellipsoid":
        if len(params) != 3:
            raise UsageError("ellipsoid ids take three semi-axes: ellipsoid:a,b,c")
        return Ellipsoid(*params)
    raise UsageError(f"unknown surface kind '{kind}'")


def _resolve(surface: Union[str, ImplicitSurface]) -> ImplicitSurface:
    if isinstance(surface, ImplicitSurface):
        return surface
    from app.services.manifolds import get_manifold

    resolved = get_manifold(surface)
    if not isinstance(resolved, ImplicitSurface):
        raise UsageError(f"{surface} is not a surface id")
    return resolved


def surface_metric(surface: Union[str, ImplicitSurface], q) -> np.ndarray:
    """Metric matrix G_ij = <d_i embed, d_j embed> at chart point(s) q."""
    s = _resolve(surface)
    q_arr = np.asarray(q, dtype=float)
    metric = s.metric(np.atleast_2d(q_arr))
    smallest = np.linalg.eigvalsh(metric)[:, 0]
    if np.any(smallest <= 1e-8):
        raise DegenerateMetricError(
            f"metric of {s.manifold_id} is degenerate (smallest eigenvalue {float(smallest.min()):.3g})",
            chart_points=np.atleast_2d(q_arr)[smallest <= 1e-8].tolist(),
        )
    return metric[0] if q_arr.ndim == 1 else metric


def geodesic_bvp(surface: Union[str, ImplicitSurface], x, v) -> GeodesicSolution:
    """Minimizing geodesic between chart points x and v, with tie detection."""
    s = _resolve(surface)
    qx, qv = np.atleast_2d(np.asarray(x, dtype=float)), np.atleast_2d(np.asarray(v, dtype=float))
    px, pv = s.embed(qx), s.embed(qv)
    if np.linalg.norm(px - pv) < 1e-12:
        raise UsageError("geodesic endpoints coincide")
    found = s.search(px, pv)
    if not found.converged[0]:
        raise GeodesicConvergenceError(
            f"no shooting restart converged on {s.manifold_id}", residuals=[float(found.residual[0])]
        )

    flow = s._flow(px, found.velocity, steps=2 * settings.SURFACE_JACOBI_STEPS, record=True)
    ambient = flow.path[0]
    velocity = flow.velocity[0]
    chart = s.chart_of(ambient)
    jac = s.chart_jacobian(chart)
    chart_velocity = np.einsum("bij,bj->bi", np.linalg.pinv(jac), velocity)

    diff = chart[-1] - qv[0]
    diff = np.where(np.asarray(s.periodic), wrap_centered(diff), diff)
    dist_to_cut = 0.0 if found.near_cut[0] else float(found.dist_to_cut[0])
    return GeodesicSolution(
        surface_id=s.manifold_id,
        chart_path=chart.tolist(),
        chart_velocity=chart_velocity.tolist(),
        ambient_path=ambient.tolist(),
        initial_velocity=found.velocity[0].tolist(),
        length=float(found.length[0]),
        converged=True,
        residual=float(np.linalg.norm(diff)),
        near_cut=bool(found.near_cut[0]),
        distance_to_cut=dist_to_cut if math.isfinite(dist_to_cut) else float(s.max_length),
        candidates_converged=int(found.candidates_converged[0]),
    )


def jacobi_theta(surface: Union[str, ImplicitSurface], g: GeodesicSolution) -> float:
    """Theta_v(x) along a solved geodesic from x to v."""
    s = _resolve(surface)
    if not g.converged:
        raise UsageError("jacobi_theta needs a converged geodesic")
    if g.length < 1e-8:
        return 1.0
    nodes = np.asarray(g.ambient_path, dtype=float)
    if nodes.shape[0] % 2 == 0:
        raise UsageError("geodesic solutions carry an odd number of nodes")
    steps = (nodes.shape[0] - 1) // 2
    curvature = s.gaussian_curvature(nodes)[::-1][None, :]
    r = np.array([g.length])
    y, _, conjugate = integrate_jacobi(curvature, r, steps)
    if conjugate[0]:
        raise ConjugatePointError(f"conjugate point along the geodesic on {s.manifold_id}", length=g.length)
    return float(y[0] / r[0])
