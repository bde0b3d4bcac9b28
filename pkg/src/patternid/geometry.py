"""Affine shapes, per-match transform hypotheses, and homography estimation.

Coordinates are (x, y) pixel locations. A feature's elliptical region is
parameterized by a lower-triangular matrix A = [[a, 0], [b, c]] with a, c > 0
that maps the unit circle onto the ellipse. Transform hypotheses and
homographies map query-image points into database-image coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class InvalidShapeError(ValueError):
    """Raised when an affine shape has a non-positive diagonal."""


class HomographyEstimationError(RuntimeError):
    """Raised when a homography cannot be estimated from the given points."""


@dataclass(frozen=True)
class AffineShape:
    """Lower-triangular ellipse parameterization [[a, 0], [b, c]]."""

    a: float
    b: float
    c: float

    @property
    def valid(self) -> bool:
        return self.a > 0.0 and self.c > 0.0

    @property
    def det(self) -> float:
        return self.a * self.c

    def matrix(self) -> np.ndarray:
        return np.array([[self.a, 0.0], [self.b, self.c]], dtype=np.float64)

    def inverse_matrix(self) -> np.ndarray:
        if not self.valid:
            raise InvalidShapeError(f"degenerate shape a={self.a} c={self.c}")
        d = self.a * self.c
        return np.array([[self.c / d, 0.0], [-self.b / d, self.a / d]], dtype=np.float64)


@dataclass(frozen=True)
class AffineHypothesis:
    """2x3 affine map (linear part plus translation), query -> database frame."""

    m: np.ndarray  # shape (2, 3), float64

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        if m.shape != (2, 3):
            raise ValueError(f"expected 2x3 affine map, got {m.shape}")
        object.__setattr__(self, "m", m)

    @property
    def linear(self) -> np.ndarray:
        return self.m[:, :2]

    @property
    def translation(self) -> np.ndarray:
        return self.m[:, 2]

    def project(self, points: np.ndarray) -> np.ndarray:
        """Map (n, 2) query points into database coordinates."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return pts @ self.linear.T + self.translation


@dataclass(frozen=True)
class Homography:
    """3x3 projective map, h[2][2] normalized to 1 when nonzero."""

    h: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.h, dtype=np.float64)
        if h.shape != (3, 3):
            raise ValueError(f"expected 3x3 matrix, got {h.shape}")
        if abs(h[2, 2]) > 0.0:
            h = h / h[2, 2]
        object.__setattr__(self, "h", h)

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.h))

    def project(self, points: np.ndarray) -> np.ndarray:
        """Map (n, 2) points projectively. Points mapped near the plane at
        infinity (|w| <= 1e-12) come back as +inf coordinates."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        homog = np.hstack([pts, np.ones((pts.shape[0], 1))])
        mapped = homog @ self.h.T
        w = mapped[:, 2]
        out = np.full((pts.shape[0], 2), np.inf)
        ok = np.abs(w) > 1e-12
        out[ok] = mapped[ok, :2] / w[ok, None]
        return out


def affine_hypothesis(kp_db, kp_q) -> AffineHypothesis:
    """Build the transform hypothesis implied by one keypoint correspondence.

    The linear part is A_db^{-1} A_q and the translation aligns the query
    location onto the database location, so projecting kp_q.x yields kp_db.x
    exactly.

    Raises:
        InvalidShapeError: either shape has a non-positive diagonal.
    """
    if not kp_q.shape.valid:
        raise InvalidShapeError(f"degenerate query shape {kp_q.shape}")
    lin = kp_db.shape.inverse_matrix() @ kp_q.shape.matrix()
    t = np.asarray(kp_db.x, dtype=np.float64) - lin @ np.asarray(kp_q.x, dtype=np.float64)
    return AffineHypothesis(np.column_stack([lin, t]))


def _locations(kps) -> np.ndarray:
    if isinstance(kps, np.ndarray):
        return np.asarray(kps, dtype=np.float64).reshape(-1, 2)
    return np.array([np.asarray(kp.x, dtype=np.float64) for kp in kps]).reshape(-1, 2)


def count_inliers(hyp, matches, kps_db, kps_q, t_sp: float) -> np.ndarray:
    """Indices of matches spatially consistent with a hypothesis.

    A match is an inlier when its query location, projected by ``hyp`` into
    database coordinates, lies strictly within ``t_sp`` pixels of its database
    location. Returns positions into ``matches`` in ascending order.

    ``matches`` needs ``i`` (database keypoint indices) and ``j`` (query
    keypoint indices) array attributes; ``kps_db`` / ``kps_q`` are keypoint
    sequences or (n, 2) location arrays.
    """
    if t_sp <= 0:
        raise ValueError(f"t_sp must be positive, got {t_sp}")
    i = np.asarray(matches.i, dtype=np.intp)
    j = np.asarray(matches.j, dtype=np.intp)
    if i.size == 0:
        return np.empty(0, dtype=np.intp)
    db_xy = _locations(kps_db)[i]
    q_xy = _locations(kps_q)[j]
    proj = hyp.project(q_xy)
    resid = np.linalg.norm(proj - db_xy, axis=1)
    return np.flatnonzero(resid < t_sp)


def _hartley_normalization(pts: np.ndarray) -> np.ndarray:
    """3x3 similarity taking the centroid to the origin and the mean distance
    from it to sqrt(2)."""
    centroid = pts.mean(axis=0)
    mean_dist = np.linalg.norm(pts - centroid, axis=1).mean()
    if mean_dist < 1e-12:
        raise HomographyEstimationError("all points coincident")
    s = np.sqrt(2.0) / mean_dist
    return np.array(
        [[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]]
    )


def estimate_homography(src: np.ndarray, dst: np.ndarray) -> Homography:
    """Least-squares homography from (n, 2) src points to (n, 2) dst points.

    Normalized direct linear transform: both point sets are Hartley-normalized,
    the 2n x 9 design matrix is solved by SVD, and the result is denormalized.
    Exact (to numerical precision) for noise-free projective correspondences.

    Raises:
        HomographyEstimationError: fewer than 4 pairs, a degenerate
            configuration (e.g. collinear points), or a singular result.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    n = src.shape[0]
    if n != dst.shape[0]:
        raise ValueError("src and dst must pair up")
    if n < 4:
        raise HomographyEstimationError(f"need at least 4 correspondences, got {n}")

    t_src = _hartley_normalization(src)
    t_dst = _hartley_normalization(dst)
    s = np.hstack([src, np.ones((n, 1))]) @ t_src.T
    d = np.hstack([dst, np.ones((n, 1))]) @ t_dst.T

    a = np.zeros((2 * n, 9))
    a[0::2, 0:3] = s
    a[0::2, 6:9] = -d[:, 0:1] * s
    a[1::2, 3:6] = s
    a[1::2, 6:9] = -d[:, 1:2] * s

    _, sing, vt = np.linalg.svd(a)
    if sing[7] < 1e-9 * sing[0]:
        raise HomographyEstimationError("rank-deficient configuration")
    h_norm = vt[-1].reshape(3, 3)
    h = np.linalg.inv(t_dst) @ h_norm @ t_src
    if abs(np.linalg.det(h)) <= 1e-12 * max(1.0, abs(h[2, 2]) ** 3):
        raise HomographyEstimationError("singular homography")
    hom = Homography(h)
    if abs(hom.det) <= 1e-12:
        raise HomographyEstimationError("singular homography after normalization")
    return hom
