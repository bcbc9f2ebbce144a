"""Rigid-body poses, pinhole camera with Brown distortion, visibility wedges.

Frame conventions
-----------------
World is local ENU (east, north, up). The vehicle frame has x forward,
y left and z up. Cameras follow the usual calibration convention: z
along the optical axis, x to the right, y down. A :class:`Pose` always
maps points from its local frame into the parent frame (world <- vehicle,
vehicle <- camera).

Euler angles are yaw, pitch, roll applied as intrinsic Z-Y-X rotations,
``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * np.pi


class BehindCameraError(ValueError):
    """Raised when a single point has non-positive depth in the camera frame."""


def wrap_angle(a):
    """Wrap angles to the half-open interval (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    w = np.mod(a + np.pi, TWO_PI) - np.pi
    # mod maps odd multiples of pi to -pi; the interval is closed at +pi
    w = np.where(w <= -np.pi, np.pi, w)
    return w if w.ndim else float(w)


def skew(w):
    """Cross-product matrix, batched over leading dimensions."""
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def so3_exp(w):
    """Rotation matrix ``exp([w]x)`` via the Rodrigues formula.

    Works on a single 3-vector or any stack ``(..., 3)``. Below 1e-8 rad the
    second-order Taylor expansion is used instead of the trigonometric
    coefficients.
    """
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    K = skew(w)
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * (K @ K)


def so3_log(R):
    """Rotation vector of a rotation matrix (inverse of :func:`so3_exp`)."""
    R = np.asarray(R, dtype=float)
    if R.ndim > 2:
        return np.stack([so3_log(r) for r in R.reshape(-1, 3, 3)]).reshape(R.shape[:-2] + (3,))
    cos_t = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_t)
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-8:
        return 0.5 * vee
    if np.pi - theta < 1e-5:
        # near pi the antisymmetric part vanishes; read the axis off R + I
        B = (R + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(B)))
        axis = B[:, k] / np.sqrt(max(B[k, k], 1e-300))
        axis /= np.linalg.norm(axis)
        if np.dot(axis, vee) < 0:
            axis = -axis
        # refine angle with the residual antisymmetric part
        s = np.dot(axis, vee) / 2.0
        theta = np.arctan2(s, cos_t)
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * vee


def euler_to_rotation(yaw, pitch, roll):
    """Z-Y-X intrinsic rotation; accepts scalars or equal-shape arrays."""
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    R = np.empty(np.shape(yaw) + (3, 3))
    R[..., 0, 0] = cy * cp
    R[..., 0, 1] = cy * sp * sr - sy * cr
    R[..., 0, 2] = cy * sp * cr + sy * sr
    R[..., 1, 0] = sy * cp
    R[..., 1, 1] = sy * sp * sr + cy * cr
    R[..., 1, 2] = sy * sp * cr - cy * sr
    R[..., 2, 0] = -sp
    R[..., 2, 1] = cp * sr
    R[..., 2, 2] = cp * cr
    return R


def rotation_to_euler(R):
    """Inverse of :func:`euler_to_rotation`; returns ``(yaw, pitch, roll)``."""
    R = np.asarray(R, dtype=float)
    pitch = np.arcsin(np.clip(-R[..., 2, 0], -1.0, 1.0))
    yaw = np.arctan2(R[..., 1, 0], R[..., 0, 0])
    roll = np.arctan2(R[..., 2, 1], R[..., 2, 2])
    return yaw, pitch, roll


def nearest_rotation(M):
    """Project a (stack of) 3x3 matrices onto SO(3) in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(M)
    d = np.sign(np.linalg.det(U @ Vt))
    D = np.ones(np.shape(M)[:-2] + (3,))
    D[..., 2] = d
    return (U * D[..., None, :]) @ Vt


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform mapping local coordinates into the parent frame."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_state(cls, e, n, u, yaw, pitch, roll) -> "Pose":
        """Build from the 6-vector ``[e, n, u, yaw, pitch, roll]``."""
        return cls(euler_to_rotation(yaw, pitch, roll), [e, n, u])

    @classmethod
    def from_matrix(cls, M) -> "Pose":
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3])

    def to_state(self) -> np.ndarray:
        yaw, pitch, roll = rotation_to_euler(self.rotation)
        return np.array([*self.translation, yaw, pitch, roll])

    @property
    def yaw(self) -> float:
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """``self @ other``: apply ``other`` first, then ``self``."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def apply(self, points) -> np.ndarray:
        """Map local points ``(..., 3)`` into the parent frame."""
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def orthonormality_error(self) -> float:
        return float(np.abs(self.rotation @ self.rotation.T - np.eye(3)).max())

    def __repr__(self):
        s = self.to_state()
        return ("Pose(e={:.3f}, n={:.3f}, u={:.3f}, yaw={:.4f}, pitch={:.4f}, roll={:.4f})"
                .format(*s))


# camera axes expressed in the vehicle frame: x right, y down, z forward
_FORWARD_CAMERA = np.array([[0.0, 0.0, 1.0],
                            [-1.0, 0.0, 0.0],
                            [0.0, -1.0, 0.0]])


def camera_mount(lateral=0.0, yaw=0.0, forward=0.0, up=0.0, pitch=0.0) -> Pose:
    """Vehicle <- camera extrinsic for a camera looking along vehicle +x.

    ``yaw`` turns the optical axis to the left (positive) in the vehicle's
    horizontal plane; ``pitch`` tilts it down (positive).
    """
    R = euler_to_rotation(yaw, pitch, 0.0) @ _FORWARD_CAMERA
    return Pose(R, [forward, lateral, up])


def distort(xy, coeffs):
    """Brown-Conrady model: ``coeffs = (k1, k2, p1, p2, k3)``."""
    xy = np.asarray(xy, dtype=float)
    k1, k2, p1, p2, k3 = coeffs
    x, y = xy[..., 0], xy[..., 1]
    r2 = x * x + y * y
    radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
    xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
    yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
    return np.stack([xd, yd], axis=-1)


def _distort_jacobian(x, y, coeffs):
    k1, k2, p1, p2, k3 = coeffs
    r2 = x * x + y * y
    radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
    dradial = k1 + r2 * (2.0 * k2 + 3.0 * k3 * r2)  # d radial / d r2
    j11 = radial + x * dradial * 2 * x + 2 * p1 * y + 6 * p2 * x
    j12 = x * dradial * 2 * y + 2 * p1 * x + 2 * p2 * y
    j21 = y * dradial * 2 * x + 2 * p1 * x + 2 * p2 * y
    j22 = radial + y * dradial * 2 * y + 6 * p1 * y + 2 * p2 * x
    return j11, j12, j21, j22


def undistort(xy_d, coeffs, iterations=20):
    """Invert :func:`distort` by Newton iteration."""
    xy_d = np.asarray(xy_d, dtype=float)
    x = xy_d[..., 0].copy()
    y = xy_d[..., 1].copy()
    for _ in range(iterations):
        f = distort(np.stack([x, y], axis=-1), coeffs)
        ex = f[..., 0] - xy_d[..., 0]
        ey = f[..., 1] - xy_d[..., 1]
        j11, j12, j21, j22 = _distort_jacobian(x, y, coeffs)
        det = j11 * j22 - j12 * j21
        x = x - (j22 * ex - j12 * ey) / det
        y = y - (-j21 * ex + j11 * ey) / det
        if max(np.max(np.abs(ex), initial=0.0), np.max(np.abs(ey), initial=0.0)) < 1e-15:
            break
    return np.stack([x, y], axis=-1)


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Pinhole camera with Brown distortion mounted on the vehicle.

    ``distortion`` holds ``(k1, k2, p1, p2, k3)``; shorter sequences are
    zero-padded. ``extrinsic`` maps camera coordinates into the vehicle
    frame.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    distortion: tuple = (0.0, 0.0, 0.0, 0.0, 0.0)
    extrinsic: Pose = field(default_factory=camera_mount)
    camera_id: int = 0

    def __post_init__(self):
        d = tuple(float(c) for c in self.distortion)
        if len(d) > 5:
            raise ValueError("at most 5 distortion coefficients (k1, k2, p1, p2, k3)")
        object.__setattr__(self, "distortion", d + (0.0,) * (5 - len(d)))

    @classmethod
    def simple(cls, width, height, focal, **kw) -> "CameraModel":
        return cls(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0, width, height, **kw)

    @property
    def has_distortion(self) -> bool:
        return any(self.distortion)

    def distort(self, xy):
        return distort(xy, self.distortion) if self.has_distortion else np.asarray(xy, dtype=float)

    def undistort(self, xy):
        return undistort(xy, self.distortion) if self.has_distortion else np.asarray(xy, dtype=float)

    def to_pixels(self, uv):
        uv = np.asarray(uv, dtype=float)
        return np.stack([self.fx * uv[..., 0] + self.cx, self.fy * uv[..., 1] + self.cy], axis=-1)

    def from_pixels(self, px):
        px = np.asarray(px, dtype=float)
        return np.stack([(px[..., 0] - self.cx) / self.fx, (px[..., 1] - self.cy) / self.fy], axis=-1)

    def world_to_camera(self, vehicle_pose: Pose) -> Pose:
        """Camera <- world transform for the given vehicle pose."""
        return (vehicle_pose @ self.extrinsic).inverse()

    def with_extrinsic(self, extrinsic: Pose) -> "CameraModel":
        return CameraModel(self.fx, self.fy, self.cx, self.cy, self.width, self.height,
                           self.distortion, extrinsic, self.camera_id)


def project(camera: CameraModel, vehicle_pose: Pose, points):
    """Distorted normalized image coordinates of world points.

    Returns ``(uv, depth)``. Entries with ``depth <= 0`` are behind the
    camera and their ``uv`` is NaN.
    """
    pts = np.asarray(points, dtype=float)
    pc = camera.world_to_camera(vehicle_pose).apply(pts)
    depth = pc[..., 2]
    front = depth > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        xy = pc[..., :2] / depth[..., None]
    xy = np.where(front[..., None], xy, np.nan)
    return camera.distort(xy), depth


def project_point(camera: CameraModel, vehicle_pose: Pose, point) -> np.ndarray:
    """Single-point :func:`project`; raises :class:`BehindCameraError`."""
    uv, depth = project(camera, vehicle_pose, np.asarray(point, dtype=float)[None])
    if not depth[0] > 0:
        raise BehindCameraError(f"point at depth {depth[0]:.3g} is behind the camera")
    return uv[0]


def camera_centers(camera: CameraModel, R_wv, t_wv):
    """World <- camera rotations and centers for a batch of vehicle poses."""
    R_wc = R_wv @ camera.extrinsic.rotation
    t_wc = R_wv @ camera.extrinsic.translation + t_wv
    return R_wc, t_wc


def project_batch(camera: CameraModel, R_wv, t_wv, points):
    """Project ``M`` world points for ``N`` vehicle poses.

    ``R_wv`` is ``(N, 3, 3)``, ``t_wv`` is ``(N, 3)``. Returns ``uv`` of
    shape ``(N, M, 2)`` (NaN behind the camera) and ``depth`` ``(N, M)``.
    """
    R_wc, t_wc = camera_centers(camera, np.asarray(R_wv, float), np.asarray(t_wv, float))
    pts = np.asarray(points, dtype=float)
    # X_c = R_wc^T (X_w - t_wc)
    pc = np.einsum("nji,nmj->nmi", R_wc, pts[None, :, :] - t_wc[:, None, :])
    depth = pc[..., 2]
    front = depth > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        xy = pc[..., :2] / depth[..., None]
    xy = np.where(front[..., None], xy, np.nan)
    return camera.distort(xy), depth


@dataclass(frozen=True)
class VisibilityWedge:
    """Horizontal sector around a map point where it can be detected.

    The arc runs counter-clockwise from ``gamma_a`` to ``gamma_b``. Giving
    ``gamma_b - gamma_a >= 2*pi`` (e.g. ``-pi, pi``) yields the full circle;
    equal angles yield a zero-width arc.
    """

    gamma_a: float
    gamma_b: float
    r: float
    rho: float = 1.0
    span: float = field(init=False, repr=False)

    def __post_init__(self):
        if not self.r > 0:
            raise ValueError("wedge range must be positive")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("detection probability must lie in [0, 1]")
        raw = float(self.gamma_b) - float(self.gamma_a)
        span = TWO_PI if raw >= TWO_PI - 1e-12 else float(np.mod(raw, TWO_PI))
        object.__setattr__(self, "span", span)
        object.__setattr__(self, "gamma_a", wrap_angle(self.gamma_a))
        object.__setattr__(self, "gamma_b", wrap_angle(self.gamma_b))

    @classmethod
    def from_span(cls, gamma_a, span, r, rho=1.0) -> "VisibilityWedge":
        if span >= TWO_PI - 1e-12:
            return cls(-np.pi, np.pi, r, rho)
        return cls(gamma_a, gamma_a + span, r, rho)


def in_wedge_arrays(observers, points, gamma_a, span, r):
    """Vectorised wedge test.

    ``observers`` ``(N, >=2)`` against ``points`` ``(M, >=2)`` with per-point
    wedge arrays of length ``M``; returns an ``(N, M)`` boolean array.
    """
    obs = np.asarray(observers, dtype=float)
    pts = np.asarray(points, dtype=float)
    dx = obs[:, None, 0] - pts[None, :, 0]
    dy = obs[:, None, 1] - pts[None, :, 1]
    dist = np.hypot(dx, dy)
    bearing = np.arctan2(dy, dx)
    offset = np.mod(bearing - np.asarray(gamma_a)[None, :], TWO_PI)
    span = np.asarray(span)[None, :]
    # tolerance keeps boundary bearings (and zero-width arcs) inclusive
    eps = 1e-9
    inside_arc = (offset <= span + eps) | (offset >= TWO_PI - eps)
    return (dist == 0) | ((dist <= np.asarray(r)[None, :]) & inside_arc)


def in_wedge(observer_position, point_position, wedge: VisibilityWedge) -> bool:
    """True iff the observer sits inside the point's visibility wedge."""
    return bool(in_wedge_arrays(np.atleast_2d(observer_position), np.atleast_2d(point_position),
                                [wedge.gamma_a], [wedge.span], [wedge.r])[0, 0])
