"""15-joint skeleton, forward/inverse kinematics and joint-limit clamping.

Coordinates are camera-aligned millimeters: x right, y down, z forward.
The rest pose stands upright facing the camera with the arms hanging.

The rotation stored at joint j is relative to its parent's frame and orients
the bones leaving j (the usual rig convention): G_j = G_parent(j) * q_j and
p_child = p_j + G_j * rest_offset_child. Leaf joints keep identity.
"""
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import quat

JOINT_NAMES = (
    "pelvis", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle",
    "r_hip", "r_knee", "r_ankle",
)
PARENTS = (-1, 0, 1, 1, 3, 4, 1, 6, 7, 0, 9, 10, 0, 12, 13)
ROOT = 0

# rest offsets from parent, mm
_OFFSETS = (
    (0.0, 0.0, 0.0),
    (0.0, -500.0, 0.0),
    (0.0, -200.0, 0.0),
    (180.0, 0.0, 0.0), (0.0, 280.0, 0.0), (0.0, 250.0, 0.0),
    (-180.0, 0.0, 0.0), (0.0, 280.0, 0.0), (0.0, 250.0, 0.0),
    (110.0, 0.0, 0.0), (0.0, 420.0, 0.0), (0.0, 400.0, 0.0),
    (-110.0, 0.0, 0.0), (0.0, 420.0, 0.0), (0.0, 400.0, 0.0),
)


@dataclass(frozen=True)
class Skeleton:
    names: tuple = JOINT_NAMES
    parents: tuple = PARENTS
    offsets: np.ndarray = field(default_factory=lambda: np.array(_OFFSETS))

    def __post_init__(self):
        if len(self.names) != len(self.parents) or len(self.offsets) != len(self.parents):
            raise ValueError("names, parents and offsets must have equal length")
        roots = [j for j, p in enumerate(self.parents) if p < 0]
        if roots != [0]:
            raise ValueError("exactly one root at index 0 is required")
        for j, p in enumerate(self.parents[1:], start=1):
            if not 0 <= p < j:
                raise ValueError(f"joint {self.names[j]}: parent {p} breaks topological order")
            if np.linalg.norm(self.offsets[j]) <= 0:
                raise ValueError(f"joint {self.names[j]}: zero bone length")

    @property
    def joint_count(self):
        return len(self.names)

    def children(self, j):
        return [c for c, p in enumerate(self.parents) if p == j]

    def bone_lengths(self):
        return np.linalg.norm(self.offsets, axis=1)

    def index(self, name):
        return self.names.index(name)

    def axis(self, j):
        """Rest direction of the bone that swing/twist at ``j`` is measured about."""
        kids = self.children(j)
        v = self.offsets[kids[0]] if kids else self.offsets[j]
        if not np.any(v):
            v = np.array([0.0, -1.0, 0.0])
        return v / np.linalg.norm(v)

    def rest_positions(self):
        return forward_kinematics(self, identity_rotations(self.joint_count))


@dataclass
class SkeletonPose:
    rotations: np.ndarray  # J x 4, parent-relative unit quaternions (w, x, y, z)
    root: np.ndarray = field(default_factory=lambda: np.zeros(3))
    timestamp: float = 0.0
    flagged: np.ndarray = None  # joints whose rotation fell back to rest

    def __post_init__(self):
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        self.root = np.asarray(self.root, dtype=np.float64)
        if self.flagged is None:
            self.flagged = np.zeros(len(self.rotations), dtype=bool)


@dataclass(frozen=True)
class JointLimits:
    """name -> (cone half-angle deg, twist min deg, twist max deg)."""

    table: dict

    def __post_init__(self):
        for name, (cone, lo, hi) in self.table.items():
            if not 0 < cone <= 180:
                raise ValueError(f"{name}: cone half-angle {cone} outside (0, 180]")
            if not -180 <= lo <= hi <= 180:
                raise ValueError(f"{name}: twist range [{lo}, {hi}] outside [-180, 180]")


def parse_limits(text):
    table = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"joint limits line {lineno}: expected 4 fields, got {len(parts)}")
        name, cone, lo, hi = parts[0], *map(float, parts[1:])
        if name not in JOINT_NAMES:
            raise ValueError(f"joint limits line {lineno}: unknown joint {name!r}")
        table[name] = (cone, lo, hi)
    return JointLimits(table)


def default_limits():
    text = resources.files("movnect").joinpath("data/joint_limits.cfg").read_text()
    return parse_limits(text)


def identity_rotations(n):
    return np.tile(quat.IDENTITY, (n, 1))


def global_rotations(skel, rotations):
    out = np.empty_like(np.asarray(rotations, dtype=np.float64))
    for j, p in enumerate(skel.parents):
        out[j] = rotations[j] if p < 0 else quat.mul(out[p], rotations[j])
    return out


def forward_kinematics(skel, rotations):
    """Root-relative joint positions (J x 3) for parent-relative rotations."""
    g = global_rotations(skel, rotations)
    pos = np.zeros((skel.joint_count, 3))
    for j, p in enumerate(skel.parents):
        if p >= 0:
            pos[j] = pos[p] + quat.rotate(g[p], skel.offsets[j])
    return pos


def _frame(primary, secondary):
    """Orthonormal frame (columns) with primary as axis 1, secondary fixing axis 0."""
    e1 = primary / np.linalg.norm(primary)
    s = secondary - np.dot(secondary, e1) * e1
    ns = np.linalg.norm(s)
    if ns < 1e-9:
        return None
    e0 = s / ns
    return np.stack([e0, e1, np.cross(e0, e1)], axis=1)


def _fit_rotation(rest_dirs, obs_dirs):
    """Rotation sending rest_dirs[0] onto obs_dirs[0] with rest_dirs[1] as the roll hint."""
    if len(rest_dirs) >= 2:
        fo = _frame(obs_dirs[0], obs_dirs[1])
        fr = _frame(rest_dirs[0], rest_dirs[1])
        if fo is not None and fr is not None:
            return quat.from_matrix(fo @ fr.T)
    a = rest_dirs[0] / np.linalg.norm(rest_dirs[0])
    b = obs_dirs[0] / np.linalg.norm(obs_dirs[0])
    return quat.between(a, b)


def ik_solve(skel, positions):
    """Parent-relative rotations whose FK reproduces the observed bone directions.

    Twist about single bones is unobservable from positions and set to zero.
    Joints with a zero-length observed child bone keep the rest rotation and
    are flagged.
    """
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape != (skel.joint_count, 3):
        raise ValueError(f"expected positions of shape ({skel.joint_count}, 3), got {positions.shape}")
    if not np.all(np.isfinite(positions)):
        raise ValueError("positions contain non-finite values")
    n = skel.joint_count
    rot = identity_rotations(n)
    glob = identity_rotations(n)
    flagged = np.zeros(n, dtype=bool)
    for j in range(n):
        p = skel.parents[j]
        parent_g = glob[p] if p >= 0 else quat.IDENTITY
        kids = skel.children(j)
        if kids:
            obs = [positions[c] - positions[j] for c in kids]
            if any(np.linalg.norm(v) < 1e-9 for v in obs):
                flagged[j] = True
            else:
                rest = [skel.offsets[c] for c in kids]
                # multi-child joints: primary bone plus the line between the two side bones
                if len(kids) == 3:
                    rest = [rest[0], rest[1] - rest[2]]
                    obs = [obs[0], obs[1] - obs[2]]
                local = [quat.rotate(quat.conj(parent_g), v) for v in obs]
                rot[j] = _fit_rotation(rest, local)
        glob[j] = rot[j] if p < 0 else quat.mul(parent_g, rot[j])
    return SkeletonPose(rotations=rot, flagged=flagged)


def _signed_twist(twist, axis):
    a = 2.0 * np.arctan2(np.dot(twist[1:], axis), twist[0])
    return (a + np.pi) % (2 * np.pi) - np.pi


def clamp_rotation(q, axis, cone_deg, twist_lo_deg, twist_hi_deg, tol=1e-9):
    swing, twist = quat.swing_twist(q, axis)
    if swing[0] < 0:
        swing = -swing
    swing_angle = quat.angle(swing)
    twist_angle = _signed_twist(twist, axis)
    cone = np.radians(cone_deg)
    lo, hi = np.radians(twist_lo_deg), np.radians(twist_hi_deg)
    swing_ok = swing_angle <= cone + tol
    twist_ok = lo - tol <= twist_angle <= hi + tol
    if swing_ok and twist_ok:
        return q
    if not swing_ok:
        swing = quat.from_axis_angle(swing[1:], cone)
    if not twist_ok:
        twist = quat.from_axis_angle(axis, np.clip(twist_angle, lo, hi))
    return quat.normalize(quat.mul(swing, twist))


def clamp_limits(skel, pose, limits):
    """Clamp each limited joint's swing to its cone and twist to its range."""
    rot = pose.rotations.copy()
    for name, (cone, lo, hi) in limits.table.items():
        j = skel.index(name)
        rot[j] = clamp_rotation(pose.rotations[j], skel.axis(j), cone, lo, hi)
    return SkeletonPose(rotations=rot, root=pose.root.copy(), timestamp=pose.timestamp,
                        flagged=pose.flagged.copy())


def bone_directions(skel, positions):
    positions = np.asarray(positions, dtype=np.float64)
    out = np.zeros((skel.joint_count - 1, 3))
    for k, j in enumerate(range(1, skel.joint_count)):
        v = positions[j] - positions[skel.parents[j]]
        out[k] = v / np.linalg.norm(v)
    return out


def random_pose(skel, limits, rng, spread=0.5, root_yaw_deg=45.0, root_tilt_deg=10.0):
    """Random parent-relative rotations inside ``limits``.

    Each limited joint swings about a random axis perpendicular to its bone by
    up to ``spread`` of its cone and twists within ``spread`` of its range.
    """
    rot = identity_rotations(skel.joint_count)
    yaw = rng.uniform(-1, 1) * np.radians(root_yaw_deg)
    pitch = rng.uniform(-1, 1) * np.radians(root_tilt_deg)
    roll = rng.uniform(-1, 1) * np.radians(root_tilt_deg)
    rot[0] = quat.mul(
        quat.from_axis_angle([0.0, 1.0, 0.0], yaw),
        quat.mul(quat.from_axis_angle([1.0, 0.0, 0.0], pitch), quat.from_axis_angle([0.0, 0.0, 1.0], roll)),
    )
    for name, (cone, lo, hi) in limits.table.items():
        j = skel.index(name)
        axis = skel.axis(j)
        perp = np.cross(axis, rng.normal(size=3))
        swing = quat.from_axis_angle(perp, rng.uniform(0, spread) * np.radians(cone))
        twist = quat.from_axis_angle(axis, spread * rng.uniform(np.radians(lo), np.radians(hi)))
        rot[j] = quat.mul(swing, twist)
    return rot
