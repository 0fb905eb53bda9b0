"""Batched linear algebra helpers shared by the geometry backends."""

import numpy as np


TWO_PI = 2.0 * np.pi


def norm(u: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(u * u, axis=-1))


def dot(u: np.ndarray, w: np.ndarray) -> np.ndarray:
    return np.sum(u * w, axis=-1)


def frame_coords(frame: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Coordinates of tangent vectors ``u`` (B, n) in orthonormal frames (B, d, n)."""
    return np.sum(frame * u[:, None, :], axis=-1)


def from_frame(frame: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Tangent vector ``sum_i c_i frame_i`` for coordinates ``c`` (B, d)."""
    return np.sum(c[:, :, None] * frame, axis=1)


def orthonormalize_rows(frame: np.ndarray) -> np.ndarray:
    """Re-orthonormalize the rows of a batch of frames with a sign-fixed QR.

    The sign fix keeps each row on the side of its input vector, so frames
    that are already orthonormal come back unchanged up to rounding.
    """
    q, r = np.linalg.qr(np.swapaxes(frame, -1, -2))
    signs = np.sign(np.diagonal(r, axis1=-2, axis2=-1))
    signs = np.where(signs == 0.0, 1.0, signs)
    q = q * signs[..., None, :]
    return np.swapaxes(q, -1, -2)


def frame_defect(frame: np.ndarray) -> np.ndarray:
    """Largest deviation of ``F F^T`` from the identity, per frame."""
    gram = frame @ np.swapaxes(frame, -1, -2)
    eye = np.eye(frame.shape[-2])
    return np.max(np.abs(gram - eye), axis=(-2, -1))


def hat(omega: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrices of axis vectors (..., 3) -> (..., 3, 3)."""
    x, y, z = omega[..., 0], omega[..., 1], omega[..., 2]
    zero = np.zeros_like(x)
    return np.stack(
        [
            np.stack([zero, -z, y], axis=-1),
            np.stack([z, zero, -x], axis=-1),
            np.stack([-y, x, zero], axis=-1),
        ],
        axis=-2,
    )


def vee(mat: np.ndarray) -> np.ndarray:
    """Axis vectors of the skew part of (..., 3, 3) matrices."""
    return 0.5 * np.stack(
        [
            mat[..., 2, 1] - mat[..., 1, 2],
            mat[..., 0, 2] - mat[..., 2, 0],
            mat[..., 1, 0] - mat[..., 0, 1],
        ],
        axis=-1,
    )


def wrap_centered(angle: np.ndarray) -> np.ndarray:
    """Wrap angles into [-pi, pi)."""
    return np.mod(angle + np.pi, TWO_PI) - np.pi


def wrap_positive(angle: np.ndarray) -> np.ndarray:
    """Wrap angles into [0, 2 pi)."""
    wrapped = np.mod(angle, TWO_PI)
    # mod can round up to exactly 2 pi for tiny negative inputs
    return np.where(wrapped >= TWO_PI, 0.0, wrapped)


def cot_minus_inv(r: np.ndarray) -> np.ndarray:
    """``cot(r) - 1/r`` with the series ``-r/3 - r^3/45`` near zero."""
    r = np.asarray(r, dtype=float)
    small = np.abs(r) < 1e-4
    safe = np.where(small, 1.0, r)
    exact = np.cos(safe) / np.sin(safe) - 1.0 / safe
    series = -r / 3.0 - r ** 3 / 45.0
    return np.where(small, series, exact)


def r_cot(r: np.ndarray) -> np.ndarray:
    """``r cot(r)`` with the limit 1 at zero."""
    r = np.asarray(r, dtype=float)
    small = np.abs(r) < 1e-4
    safe = np.where(small, 1.0, r)
    exact = safe * np.cos(safe) / np.sin(safe)
    return np.where(small, 1.0 - r ** 2 / 3.0, exact)


def sinc(r: np.ndarray) -> np.ndarray:
    """Unnormalized ``sin(r)/r``."""
    return np.sinc(np.asarray(r, dtype=float) / np.pi)
