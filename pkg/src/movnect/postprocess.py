"""Temporal filtering, global root recovery and the pose stabilization chain."""
import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels, quat
from .decode import CropTransform, Keypoints2D, decode_pose
from .skeleton import (
    Skeleton,
    SkeletonPose,
    clamp_limits,
    default_limits,
    identity_rotations,
    ik_solve,
)

MIN_CUTOFF = 1.0
BETA = 0.007
D_CUTOFF = 1.0
# beta is in units of the signal's speed; quaternion components move about
# 1 / (2 x bone length) as fast as joints in mm, so rotations use beta x 600 mm
ROT_BETA = BETA * 600.0


@dataclass
class OneEuroState:
    min_cutoff: float = MIN_CUTOFF
    beta: float = BETA
    d_cutoff: float = D_CUTOFF
    x_prev: np.ndarray = None
    dx_prev: np.ndarray = None
    t_prev: np.ndarray = field(default_factory=lambda: np.zeros(1))
    started: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=np.bool_))

    def __post_init__(self):
        if not self.min_cutoff > 0:
            raise ValueError(f"min_cutoff must be > 0, got {self.min_cutoff}")
        if not self.d_cutoff > 0:
            raise ValueError(f"d_cutoff must be > 0, got {self.d_cutoff}")
        if not self.beta >= 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")


def one_euro_run(state, xs, ts):
    """Filter a (T, ...) block of samples with timestamps ``ts``; updates ``state``."""
    xs = np.asarray(xs, dtype=np.float64)
    ts = np.asarray(ts, dtype=np.float64).reshape(-1)
    if len(ts) != len(xs):
        raise ValueError(f"{len(xs)} samples but {len(ts)} timestamps")
    if len(ts) == 0:
        return xs.copy()
    shape = xs.shape[1:]
    flat = np.ascontiguousarray(xs.reshape(len(xs), -1))
    if state.x_prev is None:
        state.x_prev = np.zeros(flat.shape[1])
        state.dx_prev = np.zeros(flat.shape[1])
    elif state.x_prev.shape[0] != flat.shape[1]:
        raise ValueError(f"filter holds {state.x_prev.shape[0]} channels, got {flat.shape[1]}")
    steps = np.diff(ts)
    if np.any(steps <= 0) or (state.started[0] and ts[0] <= state.t_prev[0]):
        raise ValueError("timestamps must be strictly increasing")
    y = kernels.one_euro_run(flat, ts, float(state.min_cutoff), float(state.beta), float(state.d_cutoff),
                             state.x_prev, state.dx_prev, state.t_prev, state.started)
    return y.reshape((len(xs),) + shape)


def one_euro_step(state, x, t):
    """One sample (scalar or array) through the filter."""
    x = np.asarray(x, dtype=np.float64)
    y = one_euro_run(state, x[None], [t])[0]
    return float(y) if y.ndim == 0 else y


def global_position(pose3d, keypoints, focal, principal_point=None):
    """Root position (mm) from root-relative 3D joints and frame keypoints.

    scale = RMS spread of the 3D xy coordinates over RMS spread of the 2D
    keypoints; result = scale * (mean K, f) - (mean P_xy, 0), with K taken
    relative to the principal point (origin when none is given).
    """
    pose3d = np.asarray(pose3d, dtype=np.float64)
    if isinstance(keypoints, Keypoints2D):
        uv, vis = keypoints.uv, keypoints.visible
    else:
        uv = np.asarray(keypoints, dtype=np.float64)
        vis = np.ones(len(uv), dtype=bool)
    if principal_point is not None:
        uv = uv - np.asarray(principal_point, dtype=np.float64)
    if vis.sum() < 2:
        raise ValueError(f"{int(vis.sum())} visible joints, need at least 2")
    k = uv[vis]
    p = pose3d[vis, :2]
    k_mean = k.mean(axis=0)
    p_mean = p.mean(axis=0)
    spread2d = np.sqrt(np.sum((k - k_mean) ** 2))
    if spread2d == 0:
        raise ValueError("keypoints have zero 2D spread; projection is degenerate")
    spread3d = np.sqrt(np.sum((p - p_mean) ** 2))
    scale = spread3d / spread2d
    return np.array([scale * k_mean[0] - p_mean[0], scale * k_mean[1] - p_mean[1], scale * focal])


@dataclass
class PoseFrame:
    """Raw per-frame measurement fed to the stabilizer."""

    t: float
    keypoints: Keypoints2D  # crop px
    pose3d: np.ndarray  # J x 3 mm root-relative
    transform: CropTransform = field(default_factory=CropTransform)
    locmaps: np.ndarray = None  # 3 x J x h x w, enables the re-read after 2D filtering
    lost: bool = False


@dataclass
class StreamConfig:
    focal: float = 1000.0
    principal_point: tuple = None
    min_cutoff: float = MIN_CUTOFF
    beta: float = BETA
    d_cutoff: float = D_CUTOFF
    rot_min_cutoff: float = MIN_CUTOFF
    rot_beta: float = ROT_BETA
    rot_d_cutoff: float = D_CUTOFF
    stride: int = 8
    skeleton: Skeleton = field(default_factory=Skeleton)
    limits: object = field(default_factory=default_limits)


@dataclass
class StableFrame:
    pose: SkeletonPose
    keypoints: Keypoints2D  # filtered, frame px
    pose3d: np.ndarray  # filtered root-relative mm
    lost: bool
    stage_ms: dict


STAGES = ("filter2d", "reread", "filter3d", "global", "ik", "clamp", "filter_rot")


class Stabilizer:
    """Stateful stabilization chain for one stream."""

    def __init__(self, config=None):
        self.config = config or StreamConfig()
        c = self.config
        self.f2d = OneEuroState(c.min_cutoff, c.beta, c.d_cutoff)
        self.f3d = OneEuroState(c.min_cutoff, c.beta, c.d_cutoff)
        self.frot = OneEuroState(c.rot_min_cutoff, c.rot_beta, c.rot_d_cutoff)
        self.last_rot = None
        self.last = None

    def _hold(self, frame):
        n = self.config.skeleton.joint_count
        if self.last is None:
            pose = SkeletonPose(identity_rotations(n), timestamp=frame.t)
            kp = Keypoints2D(np.zeros((n, 2)), np.zeros(n), np.zeros(n, dtype=bool))
            return StableFrame(pose, kp, np.zeros((n, 3)), True, {s: 0.0 for s in STAGES})
        prev = self.last
        pose = SkeletonPose(prev.pose.rotations.copy(), prev.pose.root.copy(), frame.t, prev.pose.flagged.copy())
        return StableFrame(pose, prev.keypoints, prev.pose3d.copy(), True, {s: 0.0 for s in STAGES})

    def step(self, frame):
        if frame.lost:
            return self._hold(frame)
        c = self.config
        ms = {}
        clock = time.perf_counter

        t0 = clock()
        kp_frame = frame.transform.to_frame(frame.keypoints.uv)
        uv = one_euro_run(self.f2d, kp_frame[None], [frame.t])[0]
        kp = Keypoints2D(uv, frame.keypoints.conf.copy(), frame.keypoints.visible.copy())
        t1 = clock()
        ms["filter2d"] = (t1 - t0) * 1e3

        if frame.locmaps is not None:
            crop_kp = Keypoints2D(frame.transform.to_crop(uv), kp.conf, kp.visible)
            raw3d = decode_pose(frame.locmaps, crop_kp, stride=c.stride)
        else:
            raw3d = np.asarray(frame.pose3d, dtype=np.float64)
        t2 = clock()
        ms["reread"] = (t2 - t1) * 1e3

        p3d = one_euro_run(self.f3d, raw3d[None], [frame.t])[0]
        t3 = clock()
        ms["filter3d"] = (t3 - t2) * 1e3

        root = global_position(p3d, kp, c.focal, c.principal_point)
        t4 = clock()
        ms["global"] = (t4 - t3) * 1e3

        pose = ik_solve(c.skeleton, p3d)
        t5 = clock()
        ms["ik"] = (t5 - t4) * 1e3

        pose = clamp_limits(c.skeleton, pose, c.limits)
        t6 = clock()
        ms["clamp"] = (t6 - t5) * 1e3

        rot = pose.rotations.copy()
        if self.last_rot is not None:
            # keep each quaternion on the previous frame's hemisphere
            flip = np.sum(rot * self.last_rot, axis=1) < 0
            rot[flip] = -rot[flip]
        rot = one_euro_run(self.frot, rot[None], [frame.t])[0]
        rot = quat.normalize(rot)
        self.last_rot = rot
        t7 = clock()
        ms["filter_rot"] = (t7 - t6) * 1e3

        out = SkeletonPose(rot, root, frame.t, pose.flagged)
        self.last = StableFrame(out, kp, p3d, False, ms)
        return self.last


def stabilize_stream(frames, config=None):
    stab = Stabilizer(config)
    return [stab.step(f).pose for f in frames]
