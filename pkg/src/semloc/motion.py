"""Odometry-driven process model, road projection and odometry simulation.

The vehicle pose ``T`` (world <- vehicle) is advanced by the body-frame
increment ``Delta = [exp([dt*w + q_w]x), dt*v + q_v]``::

    T_t = T_{t-1} @ Delta

which is the same update as ``M_t = Delta^-1 @ M_{t-1}`` written for the
world -> vehicle matrix ``M = T^-1``. Angular rates are held in
``(wx, wy, wz)`` order internally; the odometry CSV keeps the
``wz, wy, wx`` column order of the dataset description.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .geometry import (Pose, euler_to_rotation, nearest_rotation, rotation_to_euler, so3_exp,
                       so3_log, wrap_angle)

RENORMALIZE_EVERY = 1000


@dataclass(frozen=True)
class OdometryReading:
    v: tuple
    omega: tuple
    dt: float

    def __post_init__(self):
        v = tuple(float(x) for x in self.v)
        w = tuple(float(x) for x in self.omega)
        if len(v) != 3 or len(w) != 3:
            raise ValueError("velocity and rotational velocity must be 3-vectors")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not all(np.isfinite(v + w)):
            raise ValueError("odometry must be finite")
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "omega", w)
        object.__setattr__(self, "dt", float(self.dt))


def _psd_sqrt(Q):
    Q = np.asarray(Q, dtype=float).reshape(3, 3)
    if not np.allclose(Q, Q.T, atol=1e-12):
        raise ValueError("covariance must be symmetric")
    w, V = np.linalg.eigh(Q)
    if w.min() < -1e-12:
        raise ValueError("covariance must be positive semi-definite")
    return V * np.sqrt(np.clip(w, 0.0, None))


@dataclass(frozen=True, eq=False)
class MotionNoiseConfig:
    """Process noise densities and the on-road mixture weight.

    ``Q_v`` (m^2/s) and ``Q_omega`` (rad^2/s) are scaled by ``dt`` per step.
    """

    Q_v: np.ndarray = field(default_factory=lambda: np.diag([0.1, 0.1, 0.01]))
    Q_omega: np.ndarray = field(default_factory=lambda: np.diag([1e-5, 1e-5, 2e-4]))
    alpha_road: float = 0.02

    def __post_init__(self):
        if not 0.0 <= self.alpha_road <= 1.0:
            raise ValueError("alpha_road must lie in [0, 1]")
        object.__setattr__(self, "_Lv", _psd_sqrt(self.Q_v))
        object.__setattr__(self, "_Lw", _psd_sqrt(self.Q_omega))

    @classmethod
    def zero(cls, alpha_road=0.0) -> "MotionNoiseConfig":
        return cls(np.zeros((3, 3)), np.zeros((3, 3)), alpha_road)


@dataclass(frozen=True)
class OdometrySimConfig:
    """Noise and AR(1) angular-rate bias added to true relative motion."""

    gamma: float = 1e-5
    bias_drive_var: float = 9e-10
    omega_noise_var: float = 2.5e-5
    v_noise_var: float = 4e-4

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if min(self.bias_drive_var, self.omega_noise_var, self.v_noise_var) < 0:
            raise ValueError("variances must be nonnegative")

    @classmethod
    def noiseless(cls) -> "OdometrySimConfig":
        return cls(0.0, 0.0, 0.0, 0.0)

    @property
    def stationary_bias_var(self) -> float:
        phi = 1.0 - self.gamma
        return self.bias_drive_var / (1.0 - phi * phi) if self.gamma > 0 else np.inf


def propagate_batch(R, t, odo: OdometryReading, noise: MotionNoiseConfig, rng=None):
    """Advance ``N`` poses ``(R (N,3,3), t (N,3))`` by one odometry step."""
    R = np.asarray(R, dtype=float)
    t = np.asarray(t, dtype=float)
    n = len(t)
    dt = odo.dt
    w = np.broadcast_to(dt * np.asarray(odo.omega), (n, 3))
    d = np.broadcast_to(dt * np.asarray(odo.v), (n, 3))
    if rng is not None:
        # both draws happen unconditionally so stream consumption is fixed
        zw = rng.standard_normal((n, 3))
        zv = rng.standard_normal((n, 3))
        w = w + np.sqrt(dt) * zw @ noise._Lw.T
        d = d + np.sqrt(dt) * zv @ noise._Lv.T
    dR = so3_exp(w)
    t_new = t + np.einsum("nij,nj->ni", R, d)
    return R @ dR, t_new


def propagate(pose: Pose, odo: OdometryReading, noise: MotionNoiseConfig, rng=None) -> Pose:
    """One-pose process-model update; ``rng=None`` means noise-free."""
    R, t = propagate_batch(pose.rotation[None], pose.translation[None], odo, noise, rng)
    return Pose(R[0], t[0])


def project_to_road_arrays(positions, road):
    """Nearest points on the road polyline.

    ``road`` rows are ``[e, n, u, yaw, pitch, roll]``. Returns projected
    positions ``(N, 3)`` and interpolated yaw ``(N,)``.
    """
    P = np.atleast_2d(np.asarray(positions, dtype=float))
    road = np.asarray(road, dtype=float).reshape(-1, 6)
    if len(road) == 0:
        raise ValueError("road must be non-empty")
    if len(road) == 1:
        return np.repeat(road[:, :3], len(P), axis=0), np.full(len(P), road[0, 3])
    a = road[:-1, :3]
    b = road[1:, :3]
    ab = b - a
    L2 = np.einsum("ij,ij->i", ab, ab)
    rel = P[:, None, :] - a[None, :, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.einsum("nij,ij->ni", rel, ab) / L2[None, :]
    s = np.where(L2[None, :] > 0, np.clip(s, 0.0, 1.0), 0.0)
    foot = (1.0 - s)[..., None] * a[None] + s[..., None] * b[None]
    d2 = np.einsum("nij,nij->ni", foot - P[:, None, :], foot - P[:, None, :])
    k = np.argmin(d2, axis=1)
    rows = np.arange(len(P))
    sk = s[rows, k]
    dyaw = wrap_angle(road[k + 1, 3] - road[k, 3])
    yaw = wrap_angle(road[k, 3] + sk * dyaw)
    return foot[rows, k], np.atleast_1d(yaw)


def project_to_road(pose: Pose, road) -> Pose:
    """Move a pose onto the nearest point of the road polyline.

    ``road`` is a list of :class:`Pose` or an array of state rows. The yaw
    is interpolated along the matched segment; pitch and roll are kept.
    """
    if len(road) and isinstance(road[0], Pose):
        road = np.array([p.to_state() for p in road])
    pos, yaw = project_to_road_arrays(pose.translation[None], road)
    _, pitch, roll = pose.to_state()[3:]
    return Pose.from_state(*pos[0], yaw[0], pitch, roll)


def _road_rotation(R, yaw):
    """Replace the yaw of each rotation while keeping pitch and roll."""
    _, pitch, roll = rotation_to_euler(R)
    return euler_to_rotation(yaw, pitch, roll)


def propagate_mixture_batch(R, t, odo, noise: MotionNoiseConfig, road, rng):
    """Mixture process model: a fraction ``alpha_road`` lands on the road.

    Returns ``(R, t, on_road_mask)``.
    """
    R, t = propagate_batch(R, t, odo, noise, rng)
    on_road = rng.random(len(t)) < noise.alpha_road
    if np.any(on_road):
        pos, yaw = project_to_road_arrays(t[on_road], road)
        t = t.copy()
        R = R.copy()
        t[on_road] = pos
        R[on_road] = _road_rotation(R[on_road], yaw)
    return R, t, on_road


def propagate_mixture(pose: Pose, odo, noise: MotionNoiseConfig, road, rng) -> Pose:
    if len(road) and isinstance(road[0], Pose):
        road = np.array([p.to_state() for p in road])
    R, t, _ = propagate_mixture_batch(pose.rotation[None], pose.translation[None], odo, noise, road, rng)
    return Pose(R[0], t[0])


def bias_step(bias, cfg: OdometrySimConfig, rng):
    """One AR(1) update ``b <- (1 - gamma) b + q_b`` for any array shape."""
    bias = np.asarray(bias, dtype=float)
    q = rng.standard_normal(bias.shape) * np.sqrt(cfg.bias_drive_var)
    return (1.0 - cfg.gamma) * bias + q


def relative_motion(T0: Pose, T1: Pose, dt: float):
    """Body-frame ``(v, omega)`` that carries ``T0`` exactly onto ``T1``."""
    rel = T0.inverse() @ T1
    return rel.translation / dt, so3_log(rel.rotation) / dt


def simulate_odometry(times, poses, cfg: OdometrySimConfig, rng, initial_bias=None):
    """Noisy, biased odometry from a ground-truth trajectory.

    Returns one :class:`OdometryReading` per consecutive pose pair.
    """
    times = np.asarray(times, dtype=float)
    if len(poses) < 2 or len(times) != len(poses):
        raise ValueError("need at least two timestamped poses")
    if np.any(np.diff(times) <= 0):
        raise ValueError("timestamps must be strictly increasing")
    bias = np.zeros(3) if initial_bias is None else np.asarray(initial_bias, dtype=float)
    out = []
    sw = np.sqrt(cfg.omega_noise_var)
    sv = np.sqrt(cfg.v_noise_var)
    for k in range(1, len(poses)):
        dt = times[k] - times[k - 1]
        v, w = relative_motion(poses[k - 1], poses[k], dt)
        bias = bias_step(bias, cfg, rng)
        w = w + bias + sw * rng.standard_normal(3)
        v = v + sv * rng.standard_normal(3)
        out.append(OdometryReading(v, w, dt))
    return out


def dead_reckon(initial: Pose, odometry) -> list:
    """Noise-free integration of odometry; returns every pose incl. the first."""
    R, t = initial.rotation.copy(), initial.translation.copy()
    zero = MotionNoiseConfig.zero()
    out = [initial]
    for k, odo in enumerate(odometry, start=1):
        Rb, tb = propagate_batch(R[None], t[None], odo, zero)
        R, t = Rb[0], tb[0]
        if k % RENORMALIZE_EVERY == 0:
            R = nearest_rotation(R)
        out.append(Pose(R, t))
    return out


# CSV helpers ---------------------------------------------------------------

TRAJECTORY_COLUMNS = ("t", "e", "n", "u", "yaw", "pitch", "roll")
ODOMETRY_COLUMNS = ("t", "dt", "vx", "vy", "vz", "wz", "wy", "wx")


def write_trajectory_csv(path, times, poses) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        for t, p in zip(times, poses):
            w.writerow([repr(float(t))] + [repr(float(x)) for x in p.to_state()])


def read_trajectory_csv(path):
    """Returns ``(times, poses)``."""
    times, poses = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            times.append(float(row["t"]))
            poses.append(Pose.from_state(*(float(row[c]) for c in TRAJECTORY_COLUMNS[1:])))
    return np.array(times), poses


def write_odometry_csv(path, times, readings) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ODOMETRY_COLUMNS)
        for t, o in zip(times, readings):
            vals = [t, o.dt, *o.v, o.omega[2], o.omega[1], o.omega[0]]
            w.writerow([repr(float(x)) for x in vals])


def read_odometry_csv(path):
    """Returns ``(times, readings)``."""
    times, out = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            times.append(float(row["t"]))
            out.append(OdometryReading(
                (float(row["vx"]), float(row["vy"]), float(row["vz"])),
                (float(row["wx"]), float(row["wy"]), float(row["wz"])),
                float(row["dt"])))
    return np.array(times), out
