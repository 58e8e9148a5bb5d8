import numpy as np
import pytest

import oracles
from movnect import postprocess as P
from movnect import quat
from movnect import skeleton as S
from movnect.decode import CropTransform, Keypoints2D
from movnect.distill import make_gt_locmaps, project, synth_motion

F = 1000.0


def run_filter(xs, ts, **kw):
    return P.one_euro_run(P.OneEuroState(**kw), np.asarray(xs)[:, None], ts)[:, 0]


def test_one_euro_matches_oracle(backend, rng):
    ts = np.cumsum(rng.uniform(0.01, 0.05, size=200))
    xs = np.cumsum(rng.normal(size=200))
    for kw in ({}, {"min_cutoff": 0.3, "beta": 0.5, "d_cutoff": 2.0}):
        np.testing.assert_allclose(run_filter(xs, ts, **kw), oracles.one_euro(xs, ts, **kw), rtol=1e-12, atol=1e-12)


def test_one_euro_block_equals_steps(backend, rng):
    xs = rng.normal(size=(30, 4, 2))
    ts = np.arange(30) / 30.0
    block = P.one_euro_run(P.OneEuroState(), xs, ts)
    st = P.OneEuroState()
    steps = np.stack([P.one_euro_step(st, x, t) for x, t in zip(xs, ts)])
    np.testing.assert_array_equal(block, steps)


def test_one_euro_fixed_point_and_transparency():
    ts = np.arange(50) / 30.0
    np.testing.assert_array_equal(run_filter(np.full(50, 3.25), ts), np.full(50, 3.25))
    xs = np.sin(ts * 7)
    np.testing.assert_allclose(run_filter(xs, ts, beta=0.0, min_cutoff=1e9), xs, atol=1e-6)


def test_one_euro_rejects_bad_time_and_params():
    st = P.OneEuroState()
    P.one_euro_step(st, 1.0, 0.5)
    with pytest.raises(ValueError):
        P.one_euro_step(st, 1.0, 0.5)
    with pytest.raises(ValueError):
        P.one_euro_run(P.OneEuroState(), np.zeros((3, 1)), [0.0, 0.2, 0.1])
    for kw in ({"min_cutoff": 0}, {"d_cutoff": -1}, {"beta": -0.1}):
        with pytest.raises(ValueError):
            P.OneEuroState(**kw)


def test_one_euro_reduces_noise_on_sinusoid():
    # jitter-dominated regime; at sigma 0.1 the 1 Hz cutoff's lag outweighs the noise
    ts = np.arange(1000) / 30.0
    clean = np.sin(2 * np.pi * 0.2 * ts)
    for seed in range(5):
        noisy = clean + np.random.default_rng(seed).normal(0, 0.3, size=ts.shape)
        out = run_filter(noisy, ts)
        assert np.var(out - clean) < np.var(noisy - clean)
        assert np.abs(out).max() <= np.abs(noisy).max()


# ---------------------------------------------------------------- global position


def test_global_position_hand_example():
    pose = np.array([[0.0, 0, 0], [100, 0, 0]])
    kp = np.array([[10.0, 20.0], [30.0, 20.0]])
    # spreads: 3D sqrt(2 * 50^2), 2D sqrt(2 * 10^2) -> scale 5
    np.testing.assert_allclose(P.global_position(pose, kp, 800.0), [5 * 20 - 50, 5 * 20 - 0, 5 * 800])


def weak_scene(rng, depth):
    skel = S.Skeleton()
    pose = S.forward_kinematics(skel, S.random_pose(skel, S.default_limits(), rng))
    # weak perspective: every joint at the root depth
    t = np.array([rng.uniform(-300, 300), rng.uniform(-300, 300), depth])
    flat = pose.copy()
    flat[:, 2] = 0.0
    return pose, project(flat, t, F, np.zeros(2)), t


def test_global_position_recovers_depth(rng):
    for _ in range(100):
        depth = rng.uniform(2000, 5000)
        pose, kp, t = weak_scene(rng, depth)
        root = P.global_position(pose, kp, F)
        assert abs(root[2] - depth) / depth < 0.02
        np.testing.assert_allclose(root, t, rtol=1e-9, atol=1e-6)


def test_global_position_translation_and_scale(rng):
    pose, kp, _ = weak_scene(rng, 3000.0)
    z = P.global_position(pose, kp, F)[2]
    moved = P.global_position(pose, kp + (37.5, -12.25), F)
    assert abs(moved[2] - z) <= 1e-9 * z
    c = kp.mean(axis=0)
    assert P.global_position(pose, c + 2.0 * (kp - c), F)[2] == pytest.approx(z / 2.0, rel=1e-12)
    pp = np.array([320.0, 240.0])
    np.testing.assert_allclose(P.global_position(pose, kp + pp, F, principal_point=pp), P.global_position(pose, kp, F))


def test_global_position_errors():
    pose = np.zeros((3, 3))
    with pytest.raises(ValueError):
        P.global_position(pose, np.ones((3, 2)), F)
    kp = Keypoints2D(np.array([[0.0, 0], [1, 1], [2, 2]]), np.ones(3), np.array([True, False, False]))
    with pytest.raises(ValueError):
        P.global_position(pose, kp, F)


# ---------------------------------------------------------------- stabilizer


def frames_from_motion(seed, n=300, noise=5.0, depth=3000.0):
    ts, _, pos = synth_motion(n, seed)
    rng = np.random.default_rng(1000 + seed)
    trans = np.array([50.0, -30.0, depth])
    frames = []
    for t, p in zip(ts, pos):
        noisy = p + rng.normal(0, noise, size=p.shape)
        noisy -= noisy[0]
        uv = project(p, trans, F, np.zeros(2)) + rng.normal(0, noise * F / depth, size=(len(p), 2))
        frames.append(P.PoseFrame(t, Keypoints2D(uv, np.ones(len(p)), np.ones(len(p), dtype=bool)), noisy))
    return frames, pos


def test_constant_input_gives_constant_output():
    ts, _, pos = synth_motion(1, 3)
    kp = Keypoints2D(project(pos[0], np.array([0, 0, 3000.0]), F, np.zeros(2)), np.ones(15), np.ones(15, bool))
    frames = [P.PoseFrame(k / 30.0, kp, pos[0]) for k in range(10)]
    out = P.stabilize_stream(frames)
    for p in out[1:]:
        np.testing.assert_allclose(p.rotations, out[0].rotations, atol=1e-12)
        np.testing.assert_allclose(p.root, out[0].root, atol=1e-9)


def test_stabilized_stream_beats_raw_and_is_unit():
    skel = S.Skeleton()
    for seed in range(5):
        frames, gt = frames_from_motion(seed)
        out = P.stabilize_stream(frames)
        raw = np.mean([np.linalg.norm(f.pose3d - g, axis=1).mean() for f, g in zip(frames, gt)])
        stab = np.mean([np.linalg.norm(S.forward_kinematics(skel, p.rotations) - g, axis=1).mean()
                        for p, g in zip(out, gt)])
        assert stab < raw
        for p in out:
            np.testing.assert_allclose(np.linalg.norm(p.rotations, axis=1), 1.0, atol=1e-6)


def test_stream_is_deterministic():
    frames, _ = frames_from_motion(0, n=40)
    a, b = P.stabilize_stream(frames), P.stabilize_stream(frames)
    for x, y in zip(a, b):
        assert np.array_equal(x.rotations, y.rotations) and np.array_equal(x.root, y.root)


def test_reread_uses_filtered_keypoints():
    _, _, pos = synth_motion(1, 4)
    pose = pos[0]
    locmaps = make_gt_locmaps(pose, (32, 32))
    uv = np.random.default_rng(0).uniform(8, 248, size=(15, 2))
    tr = CropTransform([2.0, 0.0, 100.0, 0.0, 2.0, 50.0])
    frame = P.PoseFrame(0.0, Keypoints2D(uv, np.ones(15), np.ones(15, bool)), np.zeros((15, 3)), tr, locmaps)
    st = P.Stabilizer()
    out = st.step(frame)
    np.testing.assert_allclose(out.pose3d, pose, atol=1e-9)
    np.testing.assert_allclose(out.keypoints.uv, tr.to_frame(uv))


def test_lost_frames_hold_last_pose():
    frames, _ = frames_from_motion(1, n=5)
    st = P.Stabilizer()
    lost = P.PoseFrame(-1.0, frames[0].keypoints, frames[0].pose3d, lost=True)
    first = st.step(lost)
    assert first.lost and np.array_equal(first.pose.rotations, S.identity_rotations(15))
    good = st.step(frames[0])
    held = st.step(P.PoseFrame(0.5, frames[1].keypoints, frames[1].pose3d, lost=True))
    assert held.lost and np.array_equal(held.pose.rotations, good.pose.rotations)
    assert set(good.stage_ms) == set(P.STAGES)


def test_slerp_endpoints_and_midpoint(rng):
    a, b = quat.normalize(rng.normal(size=(2, 4)))
    np.testing.assert_allclose(quat.slerp(a, b, 0.0), a, atol=1e-12)
    end = quat.slerp(a, b, 1.0)
    assert abs(np.dot(end, b)) == pytest.approx(1.0)
    mid = quat.slerp(a, b, 0.5)
    rel = lambda p, q: quat.angle(quat.mul(quat.conj(p), q))  # noqa: E731
    assert rel(a, mid) == pytest.approx(rel(mid, b), abs=1e-12)
