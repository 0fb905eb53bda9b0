"""Closed-form Riemannian geometry for the manifold zoo.

Every backend works on batches: points carry a leading batch axis and all
tangent vectors live in a fixed internal representation (ambient vectors for
spheres and surfaces, coordinate vectors for flat products, left-trivialized
axis vectors for SO(3)). Inner products are Euclidean in that representation.
Frames are stored as (B, d, n) arrays whose rows are orthonormal tangent
vectors.

The public operations at the bottom of the module take and return the pydantic
models and wrap the batched kernels.
"""

import re
from abc import ABC, abstractmethod
from functools import lru_cache
from typing import NamedTuple, Optional, Tuple

import numpy as np
from loguru import logger
from scipy.spatial.transform import Rotation

from app.core.config import settings
from app.core.exceptions import ConjugatePointError, CutLocusError, UsageError
from app.models.geometry import CutLocusInfo, FramePoint, ManifoldPoint, TangentVector
from app.utils.linalg import (
    TWO_PI,
    cot_minus_inv,
    dot,
    frame_defect,
    from_frame,
    hat,
    norm,
    orthonormalize_rows,
    r_cot,
    sinc,
    vee,
    wrap_centered,
    wrap_positive,
)
from app.utils.formatting import parse_floats


class Radial(NamedTuple):
    r: np.ndarray
    log: np.ndarray
    dist_to_cut: np.ndarray
    band: np.ndarray


class Manifold(ABC):
    manifold_id: str
    dim: int
    tangent_size: int
    point_shape: Tuple[int, ...]
    public_size: int
    cut_radius: float = np.pi
    # backends that solve for the Log numerically accept a warm start per row
    uses_hint: bool = False

    # conversions -------------------------------------------------------

    def to_internal(self, coords) -> np.ndarray:
        arr = np.atleast_2d(np.asarray(coords, dtype=float))
        if arr.shape[-1] != self.public_size:
            raise UsageError(
                f"{self.manifold_id} points have {self.public_size} coordinates, got {arr.shape[-1]}"
            )
        return self._from_public(arr)

    def to_public(self, p: np.ndarray) -> np.ndarray:
        return self._to_public(p)

    def _from_public(self, arr: np.ndarray) -> np.ndarray:
        return arr.copy()

    def _to_public(self, p: np.ndarray) -> np.ndarray:
        return p.reshape(p.shape[0], -1).copy()

    def tangent_to_public(self, p: np.ndarray, u: np.ndarray) -> np.ndarray:
        return u.copy()

    def tangent_from_public(self, p: np.ndarray, comps: np.ndarray) -> np.ndarray:
        comps = np.atleast_2d(np.asarray(comps, dtype=float))
        if comps.shape[-1] != self.tangent_size:
            raise UsageError(
                f"{self.manifold_id} tangent vectors have {self.tangent_size} components, got {comps.shape[-1]}"
            )
        return comps.copy()

    def validate_point(self, p: np.ndarray) -> None:
        if not np.all(np.isfinite(p)):
            raise UsageError(f"non-finite point on {self.manifold_id}")

    def validate_tangent(self, p: np.ndarray, u: np.ndarray) -> None:
        if not np.all(np.isfinite(u)):
            raise UsageError(f"non-finite tangent vector on {self.manifold_id}")

    def named_point(self, text: str) -> Optional[np.ndarray]:
        """Symbolic point names accepted on the command line, None when not one."""
        return None

    # geometry ----------------------------------------------------------

    @abstractmethod
    def distance(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def radial(self, x: np.ndarray, v: np.ndarray, hint: Optional[np.ndarray] = None) -> Radial:
        """Distance to ``v``, Log towards ``v`` (zero in the cut band) and cut distance."""

    @abstractmethod
    def exp(self, x: np.ndarray, w: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def transport(self, x: np.ndarray, w: np.ndarray, vecs: np.ndarray) -> np.ndarray:
        """Parallel transport of ``vecs`` (B, k, n) along t -> exp_x(t w), t in [0, 1]."""

    @abstractmethod
    def tangent_project(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def project(self, p: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def default_frame(self, x: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def random_point(self, rng: np.random.Generator, n: int) -> np.ndarray:
        ...

    def theta_r(self, r: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def eta_r(self, r: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def half_lap_r(self, r: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def radial_terms(self, x: np.ndarray, v: np.ndarray, rad: Radial) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Theta_v(x), d_r log Theta^(-1/2) and (1/2) Laplacian r^2, zero-filled in the band."""
        r = np.where(rad.band, 0.0, rad.r)
        theta = np.where(rad.band, np.nan, self.theta_r(r))
        eta = np.where(rad.band, 0.0, self.eta_r(r))
        half_lap = np.where(rad.band, np.nan, self.half_lap_r(r))
        return theta, eta, half_lap

    # derived -----------------------------------------------------------

    def log(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        return self.radial(x, v).log

    def inner(self, u: np.ndarray, w: np.ndarray) -> np.ndarray:
        return dot(u, w)

    def reframe(self, x: np.ndarray, frame: np.ndarray) -> np.ndarray:
        projected = np.stack(
            [self.tangent_project(x, frame[:, i, :]) for i in range(frame.shape[1])], axis=1
        )
        return orthonormalize_rows(projected)

    def develop(self, x: np.ndarray, frame: np.ndarray, c: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Move along exp_x(sum_i c_i frame_i) and transport the frame."""
        w = from_frame(frame, c)
        x_next = self.exp(x, w)
        frame_next = self.reframe(x_next, self.transport(x, w, frame))
        return x_next, frame_next

    def normal_chart(self, x: np.ndarray, c: np.ndarray, frame: Optional[np.ndarray] = None) -> np.ndarray:
        frame = self.default_frame(x) if frame is None else frame
        return self.exp(x, from_frame(frame, c))

    def random_tangent(self, rng: np.random.Generator, x: np.ndarray, max_norm: float) -> np.ndarray:
        n = x.shape[0]
        direction = rng.standard_normal((n, self.dim))
        direction /= norm(direction)[:, None]
        radius = max_norm * rng.uniform(0.0, 1.0, size=n) ** (1.0 / self.dim)
        return from_frame(self.default_frame(x), direction * radius[:, None])

    def mean_point(self, points: np.ndarray) -> np.ndarray:
        """Extrinsic mean projected back to the manifold."""
        return self.project(np.mean(points, axis=0, keepdims=True))

    def band_of(self, dist_to_cut: np.ndarray) -> np.ndarray:
        return dist_to_cut < settings.EPS_CUT


class Sphere(Manifold):
    """Unit sphere S^d in R^(d+1)."""

    def __init__(self, d: int):
        if d < 2:
            raise UsageError("sphere dimension must be at least 2")
        self.dim = d
        self.manifold_id = "sphere2" if d == 2 else f"sphere{d}"
        self.tangent_size = d + 1
        self.public_size = d + 1
        self.point_shape = (d + 1,)

    def validate_point(self, p):
        super().validate_point(p)
        if np.any(np.abs(norm(p) - 1.0) > 1e-10):
            raise UsageError("sphere points must have unit norm (tolerance 1e-10)")

    def validate_tangent(self, p, u):
        super().validate_tangent(p, u)
        if np.any(np.abs(dot(p, u)) > 1e-9):
            raise UsageError("sphere tangent vectors must be orthogonal to the base point")

    def distance(self, x, v):
        return 2.0 * np.arctan2(norm(x - v), norm(x + v))

    def radial(self, x, v, hint=None):
        r = self.distance(x, v)
        u = v - dot(x, v)[:, None] * x
        nu = norm(u)
        scale = np.where(nu > 0.0, r / np.where(nu > 0.0, nu, 1.0), 0.0)
        log = scale[:, None] * u
        dist_to_cut = np.pi - r
        band = self.band_of(dist_to_cut)
        log = np.where(band[:, None], 0.0, log)
        return Radial(r, log, np.where(band, 0.0, dist_to_cut), band)

    def exp(self, x, w):
        theta = norm(w)
        out = np.cos(theta)[:, None] * x + sinc(theta)[:, None] * w
        return out / norm(out)[:, None]

    def transport(self, x, w, vecs):
        theta = norm(w)
        safe = np.where(theta > 0.0, theta, 1.0)
        w_hat = np.where((theta > 0.0)[:, None], w / safe[:, None], 0.0)
        coef = np.sum(vecs * w_hat[:, None, :], axis=-1)
        shift = (np.cos(theta) - 1.0)[:, None] * w_hat - np.sin(theta)[:, None] * x
        return vecs + coef[..., None] * shift[:, None, :]

    def tangent_project(self, x, u):
        return u - dot(u, x)[:, None] * x

    def project(self, p):
        return p / norm(p)[:, None]

    def default_frame(self, x):
        n = x.shape[0]
        size = self.dim + 1
        drop = np.argmax(np.abs(x), axis=-1)
        keep = np.arange(size)[None, :] != drop[:, None]
        eye = np.broadcast_to(np.eye(size), (n, size, size))
        candidates = eye[keep].reshape(n, self.dim, size)
        return self.reframe(x, candidates)

    def random_point(self, rng, n):
        p = rng.standard_normal((n, self.dim + 1))
        return p / norm(p)[:, None]

    def theta_r(self, r):
        return sinc(r) ** (self.dim - 1)

    def eta_r(self, r):
        return -0.5 * (self.dim - 1) * cot_minus_inv(r)

    def half_lap_r(self, r):
        return 1.0 + (self.dim - 1) * r_cot(r)

    def north(self) -> np.ndarray:
        p = np.zeros((1, self.dim + 1))
        p[0, -1] = 1.0
        return p

    def named_point(self, text):
        if text in ("north", "south"):
            return self.north() if text == "north" else -self.north()
        return None


class FlatProduct(Manifold):
    """Products of circles and lines with the flat metric (cylinder, flat tori)."""

    def __init__(self, manifold_id: str, periodic: Tuple[bool, ...]):
        self.manifold_id = manifold_id
        self.periodic = np.asarray(periodic, dtype=bool)
        self.dim = len(periodic)
        self.tangent_size = self.dim
        self.public_size = self.dim
        self.point_shape = (self.dim,)
        self.cut_radius = np.pi if self.periodic.any() else np.inf

    def _from_public(self, arr):
        return self.project(arr.copy())

    def _wrapped_diff(self, x, v):
        diff = v - x
        return np.where(self.periodic[None, :], wrap_centered(diff), diff)

    def distance(self, x, v):
        return norm(self._wrapped_diff(x, v))

    def radial(self, x, v, hint=None):
        diff = self._wrapped_diff(x, v)
        r = norm(diff)
        if self.periodic.any():
            gaps = np.pi - np.abs(diff[:, self.periodic])
            dist_to_cut = np.maximum(np.min(gaps, axis=-1), 0.0)
        else:
            dist_to_cut = np.full(r.shape, np.inf)
        band = self.band_of(dist_to_cut)
        log = np.where(band[:, None], 0.0, diff)
        return Radial(r, log, np.where(band, 0.0, dist_to_cut), band)

    def exp(self, x, w):
        return self.project(x + w)

    def transport(self, x, w, vecs):
        return vecs.copy()

    def tangent_project(self, x, u):
        return u

    def project(self, p):
        return np.where(self.periodic[None, :], wrap_positive(p), p)

    def default_frame(self, x):
        return np.broadcast_to(np.eye(self.dim), (x.shape[0], self.dim, self.dim)).copy()

    def reframe(self, x, frame):
        # the flat connection keeps frames exactly orthonormal
        return frame

    def random_point(self, rng, n):
        angles = rng.uniform(0.0, TWO_PI, size=(n, self.dim))
        heights = rng.uniform(-2.0, 2.0, size=(n, self.dim))
        return np.where(self.periodic[None, :], angles, heights)

    def theta_r(self, r):
        return np.ones_like(r)

    def eta_r(self, r):
        return np.zeros_like(r)

    def half_lap_r(self, r):
        return np.full_like(r, float(self.dim))

    def mean_point(self, points):
        # circular mean on periodic coordinates
        angles = np.arctan2(np.mean(np.sin(points), axis=0), np.mean(np.cos(points), axis=0))
        linear = np.mean(points, axis=0)
        return self.project(np.where(self.periodic, angles, linear)[None, :])


class SpecialOrthogonal3(Manifold):
    """SO(3) with the bi-invariant metric scaled so that distance is the rotation angle."""

    manifold_id = "so3"
    dim = 3
    tangent_size = 3
    public_size = 9
    point_shape = (3, 3)

    def _from_public(self, arr):
        return arr.reshape(arr.shape[0], 3, 3).copy()

    def tangent_to_public(self, p, u):
        return hat(u).reshape(u.shape[0], 9)

    def tangent_from_public(self, p, comps):
        comps = np.atleast_2d(np.asarray(comps, dtype=float))
        if comps.shape[-1] != 9:
            raise UsageError("so3 tangent vectors are flattened 3x3 skew matrices")
        mats = comps.reshape(comps.shape[0], 3, 3)
        if np.any(np.abs(mats + np.swapaxes(mats, -1, -2)) > 1e-9):
            raise UsageError("so3 tangent components must form a skew-symmetric matrix")
        return vee(mats)

    def validate_point(self, p):
        super().validate_point(p)
        gram = np.swapaxes(p, -1, -2) @ p
        if np.any(np.abs(gram - np.eye(3)) > 1e-9) or np.any(np.abs(np.linalg.det(p) - 1.0) > 1e-9):
            raise UsageError("so3 points must be rotation matrices (tolerance 1e-9)")

    def _relative_rotvec(self, x, v):
        rel = np.swapaxes(x, -1, -2) @ v
        return Rotation.from_matrix(rel).as_rotvec()

    def distance(self, x, v):
        return norm(self._relative_rotvec(x, v))

    def radial(self, x, v, hint=None):
        omega = self._relative_rotvec(x, v)
        r = norm(omega)
        dist_to_cut = np.pi - r
        band = self.band_of(dist_to_cut)
        log = np.where(band[:, None], 0.0, omega)
        return Radial(r, log, np.where(band, 0.0, dist_to_cut), band)

    def exp(self, x, w):
        return x @ Rotation.from_rotvec(w).as_matrix()

    def transport(self, x, w, vecs):
        rot = Rotation.from_rotvec(-0.5 * w)
        return np.stack([rot.apply(vecs[:, j, :]) for j in range(vecs.shape[1])], axis=1)

    def tangent_project(self, x, u):
        return u

    def project(self, p):
        u, _, vt = np.linalg.svd(p)
        det = np.linalg.det(u @ vt)
        fix = np.ones((p.shape[0], 3))
        fix[:, 2] = np.sign(det)
        return (u * fix[:, None, :]) @ vt

    def default_frame(self, x):
        return np.broadcast_to(np.eye(3), (x.shape[0], 3, 3)).copy()

    def random_point(self, rng, n):
        return Rotation.random(n, random_state=rng).as_matrix()

    def theta_r(self, r):
        return sinc(0.5 * r) ** 2

    def eta_r(self, r):
        return -0.5 * cot_minus_inv(0.5 * r)

    def half_lap_r(self, r):
        return 1.0 + 2.0 * r_cot(0.5 * r)

    def mean_point(self, points):
        return Rotation.from_matrix(points).mean().as_matrix()[None, :, :]

    @staticmethod
    def identity() -> np.ndarray:
        return np.eye(3)[None, :, :]

    def named_point(self, text):
        if text == "identity":
            return self.identity()
        if text.startswith("rotvec:"):
            return Rotation.from_rotvec(parse_floats(text[len("rotvec:"):])).as_matrix()[None, :, :]
        return None


# registry --------------------------------------------------------------

_SPHERE = re.compile(r"^sphere(\d+)$")
_FLAT_TORUS = re.compile(r"^flat-torus(\d*)$")
_SURFACE = re.compile(r"^(torus|ellipsoid):(.+)$")


@lru_cache(maxsize=64)
def get_manifold(manifold_id: str) -> Manifold:
    """Resolve a manifold id: sphere<d>, cylinder, flat-torus[<d>], so3, torus:R,rho, ellipsoid:a,b,c."""
    key = manifold_id.strip().lower()
    match = _SPHERE.match(key)
    if match:
        return Sphere(int(match.group(1)))
    if key == "cylinder":
        return FlatProduct("cylinder", (True, False))
    match = _FLAT_TORUS.match(key)
    if match:
        d = int(match.group(1)) if match.group(1) else 2
        if d < 1:
            raise UsageError("flat torus dimension must be positive")
        return FlatProduct("flat-torus" if d == 2 else f"flat-torus{d}", (True,) * d)
    if key == "so3":
        return SpecialOrthogonal3()
    match = _SURFACE.match(key)
    if match:
        from app.services.surfaces import build_surface

        try:
            params = parse_floats(match.group(2))
        except ValueError:
            raise UsageError(f"malformed surface parameters in '{manifold_id}'")
        return build_surface(match.group(1), params)
    raise UsageError(f"unknown manifold id '{manifold_id}'")


def parse_point(manifold: Manifold, text: str) -> np.ndarray:
    """Parse a point given on the command line or in a config file.

    Accepts comma separated public coordinates, ``north``/``south`` on spheres,
    ``identity`` and ``rotvec:a,b,c`` on so3. Sphere inputs are normalized.
    """
    text = str(text).strip().lower()
    try:
        named = manifold.named_point(text)
    except ValueError:
        raise UsageError(f"cannot parse point '{text}' on {manifold.manifold_id}")
    if named is not None:
        return named
    try:
        coords = parse_floats(text)
    except ValueError:
        raise UsageError(f"cannot parse point '{text}' on {manifold.manifold_id}")
    p = manifold.to_internal(coords)
    projected = manifold.project(p)
    if np.max(np.abs(projected - p)) > 1e-6:
        logger.warning(f"⚠️ Projected input point {text} onto {manifold.manifold_id}")
    manifold.validate_point(projected)
    return projected


# model conversions -----------------------------------------------------


def point_model(manifold: Manifold, p: np.ndarray) -> ManifoldPoint:
    return ManifoldPoint(manifold_id=manifold.manifold_id, coords=manifold.to_public(p)[0].tolist())


def tangent_model(manifold: Manifold, p: np.ndarray, u: np.ndarray, near_cut: bool = False) -> TangentVector:
    return TangentVector(
        base=point_model(manifold, p),
        components=manifold.tangent_to_public(p, u)[0].tolist(),
        near_cut=bool(near_cut),
    )


def internal_point(x: ManifoldPoint) -> Tuple[Manifold, np.ndarray]:
    manifold = get_manifold(x.manifold_id)
    p = manifold.to_internal(x.coords)
    manifold.validate_point(p)
    return manifold, p


def _pair(x: ManifoldPoint, v: ManifoldPoint) -> Tuple[Manifold, np.ndarray, np.ndarray]:
    mx, px = internal_point(x)
    mv, pv = internal_point(v)
    if mx.manifold_id != mv.manifold_id:
        raise UsageError(f"points live on different manifolds: {mx.manifold_id} vs {mv.manifold_id}")
    return mx, px, pv


def _tangent(w: TangentVector) -> Tuple[Manifold, np.ndarray, np.ndarray]:
    manifold, p = internal_point(w.base)
    u = manifold.tangent_from_public(p, w.components)
    manifold.validate_tangent(p, u)
    return manifold, p, u


# public operations -----------------------------------------------------


def distance(x: ManifoldPoint, v: ManifoldPoint) -> float:
    manifold, px, pv = _pair(x, v)
    return float(manifold.distance(px, pv)[0])


def log_map(x: ManifoldPoint, v: ManifoldPoint) -> TangentVector:
    """Log_x(v); the zero vector flagged ``near_cut`` inside the cut band."""
    manifold, px, pv = _pair(x, v)
    rad = manifold.radial(px, pv)
    return tangent_model(manifold, px, rad.log, near_cut=bool(rad.band[0]))


def exp_map(x: ManifoldPoint, w: TangentVector) -> ManifoldPoint:
    manifold, px = internal_point(x)
    mw, pw, u = _tangent(w)
    if mw.manifold_id != manifold.manifold_id or not np.allclose(px, pw, atol=1e-12):
        raise UsageError("tangent vector is not based at x")
    return point_model(manifold, manifold.exp(px, u))


def grad_half_sq_dist(x: ManifoldPoint, v: ManifoldPoint) -> TangentVector:
    manifold, px, pv = _pair(x, v)
    rad = manifold.radial(px, pv)
    return tangent_model(manifold, px, -rad.log, near_cut=bool(rad.band[0]))


def cut_locus_query(x: ManifoldPoint, v: ManifoldPoint) -> CutLocusInfo:
    manifold, px, pv = _pair(x, v)
    rad = manifold.radial(px, pv)
    dist_to_cut = float(rad.dist_to_cut[0])
    if not np.isfinite(dist_to_cut):
        # no periodic direction, or no competing geodesic class found
        dist_to_cut = float(np.finfo(float).max)
    return CutLocusInfo(is_near_cut=bool(rad.band[0]), distance_to_cut=dist_to_cut)


def _radial_terms(x: ManifoldPoint, v: ManifoldPoint):
    manifold, px, pv = _pair(x, v)
    rad = manifold.radial(px, pv)
    if rad.band[0]:
        raise CutLocusError(
            f"r = {rad.r[0]:.6g} is within {settings.EPS_CUT:g} of the cut locus",
            distance=float(rad.r[0]),
        )
    theta, eta, half_lap = manifold.radial_terms(px, pv, rad)
    if not np.isfinite(theta[0]):
        raise ConjugatePointError(f"conjugate point between x and v on {manifold.manifold_id}", distance=float(rad.r[0]))
    return theta, eta, half_lap


def theta_jacobian(v: ManifoldPoint, x: ManifoldPoint) -> float:
    theta, _, _ = _radial_terms(x, v)
    return float(theta[0])


def d_r_log_theta_negsqrt(v: ManifoldPoint, x: ManifoldPoint) -> float:
    _, eta, _ = _radial_terms(x, v)
    return float(eta[0])


def half_laplacian_sq_dist(x: ManifoldPoint, v: ManifoldPoint) -> float:
    _, _, half_lap = _radial_terms(x, v)
    return float(half_lap[0])


def frame_model(manifold: Manifold, p: np.ndarray, frame: np.ndarray) -> FramePoint:
    rows = [manifold.tangent_to_public(p, frame[:, i, :])[0].tolist() for i in range(frame.shape[1])]
    return FramePoint(base=point_model(manifold, p), frame=rows)


def internal_frame(f: FramePoint) -> Tuple[Manifold, np.ndarray, np.ndarray]:
    manifold, p = internal_point(f.base)
    if len(f.frame) != manifold.dim:
        raise UsageError(f"a frame on {manifold.manifold_id} has {manifold.dim} vectors")
    rows = [manifold.tangent_from_public(p, row) for row in f.frame]
    frame = np.stack(rows, axis=1)
    defect = float(frame_defect(frame)[0])
    if defect > settings.FRAME_TOL:
        raise UsageError(f"frame is not orthonormal (defect {defect:.3g} > {settings.FRAME_TOL:g})")
    return manifold, p, frame


def default_frame_point(x: ManifoldPoint) -> FramePoint:
    manifold, p = internal_point(x)
    return frame_model(manifold, p, manifold.default_frame(p))


def parallel_transport_step(f: FramePoint, w: TangentVector) -> FramePoint:
    """Move the base along exp(w) and parallel-transport the frame, re-orthonormalized."""
    manifold, p, frame = internal_frame(f)
    mw, pw, u = _tangent(w)
    if mw.manifold_id != manifold.manifold_id or not np.allclose(p, pw, atol=1e-12):
        raise UsageError("tangent vector is not based at the frame's base point")
    p_next = manifold.exp(p, u)
    frame_next = manifold.reframe(p_next, manifold.transport(p, u, frame))
    return frame_model(manifold, p_next, frame_next)
