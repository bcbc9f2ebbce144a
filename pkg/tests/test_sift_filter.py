import math

import numpy as np
import pytest

from semloc.geometry import CameraModel, Pose, camera_mount, project, rotation_to_euler, so3_log
from semloc.motion import MotionNoiseConfig, OdometryReading
from semloc.semantic_map import map_from_arrays
from semloc.sift_filter import (RansacResult, SiftFilter, SiftFilterConfig, SparseFeatureSet, UkfState,
                                initial_covariance, match, p3p, ransac_pose, sift_step, ukf_time_update,
                                ukf_update)
from semloc.ukf import UnscentedParams, make_pd, ukf_predict
from semloc import ukf as U


def brute_force_match(f, m, ratio):
    out = []
    for i, x in enumerate(f):
        d = [math.sqrt(sum((a - b) ** 2 for a, b in zip(x, y))) for y in m]
        order = sorted(range(len(m)), key=lambda j: (d[j], j))
        if len(m) == 1 or (d[order[1]] > 0 and d[order[0]] / d[order[1]] < ratio):
            out.append((i, order[0]))
    return out


def random_camera_setup(rng, n=20, cam=None):
    cam = cam or CameraModel(500, 500, 320, 240, 640, 480, (-0.05, 0.01, 0.001, 0.0, 0.0), camera_mount(0.3, 0.2))
    pose = Pose.from_state(*rng.normal(0, 10, 3), rng.uniform(-3, 3), rng.normal(0, 0.05), rng.normal(0, 0.05))
    X_cam = np.column_stack([rng.uniform(-4, 4, n), rng.uniform(-3, 3, n), rng.uniform(5, 30, n)])
    world = (pose @ cam.extrinsic).apply(X_cam)
    coords = cam.distort(X_cam[:, :2] / X_cam[:, 2:3])
    return cam, pose, world, coords


# matching ----------------------------------------------------------------------------

def test_match_identical_descriptor():
    m = np.eye(4) * 100
    fi, mi = match(m[2:3] + 0.0, m)
    assert fi.tolist() == [0] and mi.tolist() == [2]


def test_match_equidistant_rejected():
    m = np.array([[1.0, 0], [-1.0, 0], [50, 50]])
    fi, _ = match(np.array([[0.0, 0.0]]), m)
    assert fi.size == 0


def test_match_single_map_descriptor_accepts():
    fi, mi = match(np.random.default_rng(0).normal(size=(5, 8)), np.zeros((1, 8)))
    assert fi.tolist() == list(range(5)) and mi.tolist() == [0] * 5


def test_match_brute_force_oracle():
    rng = np.random.default_rng(1)
    for _ in range(10):
        m = rng.normal(size=(60, 16))
        f = np.vstack([m[rng.choice(60, 20)] + rng.normal(0, 0.3, (20, 16)), rng.normal(size=(20, 16))])
        fi, mi = match(f, m, 0.8)
        assert list(zip(fi.tolist(), mi.tolist())) == brute_force_match(f, m, 0.8)


def test_match_permutation_invariant():
    rng = np.random.default_rng(2)
    m = rng.normal(size=(80, 32))
    f = m[rng.choice(80, 40)] + rng.normal(0, 0.2, (40, 32))
    base = set(zip(*match(f, m)))
    pf, pm = rng.permutation(40), rng.permutation(80)
    fi, mi = match(f[pf], m[pm])
    assert {(int(pf[a]), int(pm[b])) for a, b in zip(fi, mi)} == base


def test_config_validation():
    with pytest.raises(ValueError):
        SiftFilterConfig(lowe_ratio=1.0)
    with pytest.raises(ValueError):
        SiftFilterConfig(min_inliers=3)
    c = SiftFilterConfig()
    assert c.ransac_inlier_px == 6.0 and c.min_inliers == 7
    with pytest.raises(ValueError):
        SparseFeatureSet([[np.nan, 0]], np.zeros((1, 128)))


# P3P and RANSAC ---------------------------------------------------------------------

def test_p3p_contains_true_pose():
    rng = np.random.default_rng(3)
    for _ in range(300):
        R_true = Pose.from_state(0, 0, 0, *rng.uniform(-math.pi, math.pi, 3)).rotation
        t_true = rng.normal(0, 5, 3)
        X_cam = np.column_stack([rng.uniform(-5, 5, 3), rng.uniform(-5, 5, 3), rng.uniform(3, 40, 3)])
        world = (X_cam - t_true) @ R_true
        sols = p3p(X_cam, world)
        best = min(np.abs(world @ R.T + t - X_cam).max() for R, t in sols)
        assert len(sols) <= 4 and best < 1e-9


def test_p3p_degenerate_returns_empty():
    assert p3p(np.eye(3), np.zeros((3, 3))) == []


def test_ransac_noise_free_recovery():
    rng = np.random.default_rng(4)
    for _ in range(20):
        cam, pose, world, coords = random_camera_setup(rng)
        res = ransac_pose(coords, world, cam, SiftFilterConfig(ransac_iters=1), rng)
        assert res.success and res.inliers.all()
        assert np.linalg.norm(so3_log(res.vehicle_pose.rotation.T @ pose.rotation)) < 1e-6
        assert np.abs(res.vehicle_pose.translation - pose.translation).max() < 1e-6


def test_ransac_half_outliers():
    hits = 0
    for seed in range(100):
        rng = np.random.default_rng(100 + seed)
        cam, pose, world, coords = random_camera_setup(rng, 40)
        planted = np.zeros(40, bool)
        planted[:20] = True
        coords[20:] = rng.uniform(-0.6, 0.6, (20, 2))
        res = ransac_pose(coords, world, cam, SiftFilterConfig(ransac_iters=100), rng)
        hits += res.success and np.array_equal(res.inliers, planted)
    # per-seed success bound 1 - (1 - 0.5**3)**100 is above 0.9999
    assert hits / 100 > 0.99


@pytest.mark.parametrize("n_inliers,ok", [(7, False), (8, True)])
def test_ransac_strict_minimum(n_inliers, ok):
    rng = np.random.default_rng(5)
    cam, _, world, coords = random_camera_setup(rng, n_inliers)
    res = ransac_pose(coords, world, cam, SiftFilterConfig(), rng)
    assert isinstance(res, RansacResult) and res.success is ok and res.n_inliers == n_inliers


def test_ransac_too_few():
    cam = CameraModel.simple(10, 10, 10.0)
    res = ransac_pose(np.zeros((2, 2)), np.ones((2, 3)), cam, SiftFilterConfig(), np.random.default_rng(0))
    assert not res.success and res.iterations == 0


# UKF ---------------------------------------------------------------------------------

def test_unscented_linear_predict_and_update_equal_kalman():
    rng = np.random.default_rng(6)
    for _ in range(20):
        n, m = 6, 4
        A = rng.normal(size=(n, n))
        P = A @ A.T + np.eye(n)
        x = rng.normal(size=n)
        F = rng.normal(size=(n, n))
        Q = np.diag(rng.uniform(0.1, 1, n))
        mp, Pp = ukf_predict(x, P, lambda s: F @ s, Q)
        assert np.abs(mp - F @ x).max() < 1e-9 and np.abs(Pp - (F @ P @ F.T + Q)).max() < 1e-9
        H = rng.normal(size=(m, n))
        R = np.diag(rng.uniform(0.1, 1, m))
        z = rng.normal(size=m)
        res = U.ukf_update(x, P, z, lambda s: H @ s, R)
        S = H @ P @ H.T + R
        K = P @ H.T @ np.linalg.inv(S)
        assert np.abs(res.mean - (x + K @ (z - H @ x))).max() < 1e-9
        assert np.abs(res.cov - (P - K @ S @ K.T)).max() < 1e-9
        assert res.accepted


def test_make_pd():
    P = make_pd(np.array([[1.0, 2.0], [2.0, 1.0]]))
    assert np.linalg.eigvalsh(P).min() > 0 and np.allclose(P, P.T)
    assert UnscentedParams().alpha == 0.1


def ahead_setup():
    cam = CameraModel.simple(640, 480, 500.0, extrinsic=camera_mount())
    state = UkfState([0, 0, 1.6, 0, 0, 0], np.diag([0.5, 0.5, 0.01, 1e-6, 1e-6, 1e-6]))
    pts = np.array([[10.0, 0.0, 1.6], [12.0, 2.0, 3.0], [15.0, -3.0, 1.0], [9.0, 1.0, 0.5]])
    pred = project(cam, state.pose, pts)[0]
    return cam, state, pts, pred


def test_zero_innovation_update():
    cam, state, pts, _ = ahead_setup()
    # the unscented predicted measurement, not h(mean), is what makes the innovation zero
    h = lambda x: project(cam, Pose.from_state(*x), pts)[0].ravel()
    z_pred = U.unscented_transform(state.mean, state.cov, h, UnscentedParams(), (3, 4, 5), ())[0]
    new, res = ukf_update(state, z_pred.reshape(-1, 2), pts, cam, 2 / 500)
    assert res.accepted and np.abs(new.mean - state.mean).max() < 1e-9
    assert np.trace(new.cov) < np.trace(state.cov)


def test_lateral_offset_direction_matches_jacobian():
    cam = CameraModel.simple(640, 480, 500.0, extrinsic=camera_mount())
    state = UkfState([0, 0, 1.6, 0, 0, 0], np.diag([0.25, 0.25, 1e-4, 1e-6, 1e-6, 1e-6]))
    pt = np.array([[10.0, 0.0, 1.6]])
    sigma = 2 / 500
    h = lambda x: project(cam, Pose.from_state(*x), pt)[0].ravel()
    J = np.column_stack([(h(state.mean + e) - h(state.mean - e)) / 2e-6 for e in np.eye(6) * 1e-6])
    for du in (0.01, -0.01):
        z = h(state.mean) + [du, 0.0]
        new, res = ukf_update(state, z.reshape(1, 2), pt, cam, sigma)
        S = J @ state.cov @ J.T + sigma**2 * np.eye(2)
        lin = state.cov @ J.T @ np.linalg.solve(S, z - h(state.mean))
        delta = new.mean - state.mean
        assert np.sign(delta[1]) == np.sign(lin[1]) == np.sign(du)
        assert delta[1] == pytest.approx(lin[1], rel=0.05)


def test_gated_update_keeps_state():
    cam, state, pts, pred = ahead_setup()
    new, res = ukf_update(state, pred + 0.3, pts, cam, 2 / 500)
    assert not res.accepted and np.array_equal(new.mean, state.mean) and np.array_equal(new.cov, state.cov)


def test_time_update_grows_trace_and_stays_pd():
    s = UkfState([0, 0, 0, 0.3, 0, 0], initial_covariance([0.1, 0.1, 0.01, 0.01, 0.001, 0.001]))
    odo = OdometryReading((5, 0, 0), (0, 0, 0.1), 0.2)
    cfg = SiftFilterConfig()
    for _ in range(50):
        new = ukf_time_update(s, odo, cfg)
        assert np.trace(new.cov) > np.trace(s.cov)
        assert np.allclose(new.cov, new.cov.T, atol=1e-9) and np.linalg.eigvalsh(new.cov).min() > 0
        s = new
    assert s.mean[3] == pytest.approx(0.3 + 50 * 0.02)


# end-to-end synthetic loop -------------------------------------------------------------

RADIUS, SPEED, DT = 30.0, 5.0, 0.2


def loop_world(seed=0, n=400):
    rng = np.random.default_rng(seed)
    ang = rng.uniform(0, 2 * math.pi, n)
    rad = np.where(rng.random(n) < 0.5, rng.uniform(18, 25, n), rng.uniform(35, 42, n))
    pts = np.column_stack([rad * np.cos(ang), rad * np.sin(ang), rng.uniform(0, 6, n)])
    desc = rng.normal(0, 1, (n, 128))
    wedges = np.column_stack([np.ones(n), np.zeros(n), np.full(n, 2 * math.pi), np.full(n, 60.0)])
    th = np.linspace(0, 2 * math.pi, 73)
    road = np.column_stack([RADIUS * np.cos(th), RADIUS * np.sin(th), np.full(73, 1.6), th + math.pi / 2,
                            np.zeros(73), np.zeros(73)])
    smap = map_from_arrays(("x",), pts, wedges, [1.0], [1.0], road, dense=desc)
    cams = [CameraModel.simple(640, 480, 400.0, extrinsic=camera_mount(lateral=s * 0.5, yaw=s * 0.6), camera_id=i)
            for i, s in enumerate((1, -1))]
    return smap, cams


def truth_pose(k):
    th = SPEED * DT * k / RADIUS
    return Pose.from_state(RADIUS * math.cos(th), RADIUS * math.sin(th), 1.6, th + math.pi / 2, 0, 0)


def perfect_features(smap, cams, pose):
    out = []
    for cam in cams:
        uv, depth = project(cam, pose, smap.positions)
        px = cam.to_pixels(np.nan_to_num(uv, nan=-1e9))
        ok = (depth > 0.5) & (px[:, 0] >= 0) & (px[:, 0] < cam.width) & (px[:, 1] >= 0) & (px[:, 1] < cam.height)
        ok &= np.linalg.norm(smap.positions - pose.translation, axis=1) < 60
        out.append(SparseFeatureSet(uv[ok], smap.dense[ok], cam.camera_id))
    return out


def run_loop(steps, withheld=(), seed=0):
    smap, cams = loop_world(seed)
    rng = np.random.default_rng(seed + 1)
    flt = SiftFilter(smap, cams, SiftFilterConfig(), np.random.default_rng(seed + 2))
    flt.initialize(truth_pose(0).to_state(), initial_covariance([0.3, 0.3, 0.05, 0.02, 0.005, 0.005]))
    yaw_rate = SPEED / RADIUS
    errors = []
    for k in range(1, steps + 1):
        # biased, noisy odometry so dead reckoning drifts
        odo = OdometryReading((SPEED * 1.03 + rng.normal(0, 0.05), 0, 0), (0, 0, yaw_rate + 0.004), DT)
        frames = [] if k in withheld else perfect_features(smap, cams, truth_pose(k))
        flt.step(odo, frames)
        assert np.linalg.eigvalsh(flt.state.cov).min() > 0
        errors.append(np.linalg.norm(flt.state.mean[:3] - truth_pose(k).translation))
    return np.array(errors), flt


def test_perfect_features_on_loop():
    errors, flt = run_loop(190)
    assert errors.max() < 0.1
    assert flt.gated == 0


def test_dropout_recovery():
    errors, _ = run_loop(160, withheld=range(41, 141))
    before = errors[20:40].max()
    assert errors[139] > 10 * before          # dead reckoning drifted while blind
    assert errors[144:].max() <= max(2 * before, 0.05)


def test_no_features_is_pure_prediction():
    smap, cams = loop_world()
    s = UkfState(truth_pose(0).to_state(), initial_covariance([0.3, 0.3, 0.05, 0.02, 0.005, 0.005]))
    odo = OdometryReading((SPEED, 0, 0), (0, 0, SPEED / RADIUS), DT)
    new, info = sift_step(s, odo, [], smap, cams, SiftFilterConfig(), np.random.default_rng(0))
    assert not info.updated and np.trace(new.cov) > np.trace(s.cov)
    pred = ukf_time_update(s, odo, SiftFilterConfig())
    assert np.array_equal(new.mean, pred.mean)


def test_sift_filter_needs_dense_map():
    smap = map_from_arrays(("a",), np.zeros((1, 3)), [[1, 0, 1, 10]], [1.0], [1.0], [[0] * 6], sem_pmfs=[[1.0]])
    with pytest.raises(ValueError):
        SiftFilter(smap, [CameraModel.simple(10, 10, 10.0)])
    assert rotation_to_euler(np.eye(3)) is not None
    assert MotionNoiseConfig.zero().alpha_road == 0.0
