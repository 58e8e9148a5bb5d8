"""Map decoding and the keypoint-driven bounding-box tracker.

Cell (r, c) of a stride-s map is centered on crop pixel ((c + .5) s, (r + .5) s).
Pixel coordinates are continuous: pixel i covers [i, i + 1).
"""
from dataclasses import dataclass, field

import numpy as np

OUTPUT_STRIDE = 8
MOMENTUM = 0.75
BUFFER_X = 0.4  # per side, fraction of width
BUFFER_Y = 0.2  # per side, fraction of height
BOOTSTRAP_FRAMES = 3


class TrackingLost(Exception):
    pass


@dataclass
class Keypoints2D:
    uv: np.ndarray  # J x 2
    conf: np.ndarray  # J
    visible: np.ndarray = None  # J bool

    def __post_init__(self):
        self.uv = np.asarray(self.uv, dtype=np.float64)
        self.conf = np.asarray(self.conf, dtype=np.float64)
        if self.visible is None:
            self.visible = self.conf > 0
        self.visible = np.asarray(self.visible, dtype=bool)

    def __len__(self):
        return len(self.uv)


def _subcell(left, mid, right):
    denom = left - 2.0 * mid + right
    if denom >= 0.0:
        return 0.0
    return float(np.clip(0.5 * (left - right) / denom, -0.5, 0.5))


def _edge_subcell(line, i):
    """Offset for a peak on the first or last cell, from the three innermost cells.

    A value parabola through a bump's tail is nearly flat, so this one fits
    the log of the values (exact for a Gaussian); non-positive values give 0.
    """
    n = len(line)
    if n < 3:
        return 0.0
    sign = 1.0 if i == 0 else -1.0
    a, b, c = line[:3] if i == 0 else line[::-1][:3]
    if min(a, b, c) <= 0.0:
        return 0.0
    la, lb, lc = np.log([a, b, c])
    denom = la - 2.0 * lb + lc
    if denom >= 0.0:
        return 0.0
    return float(np.clip(sign * (1.0 + 0.5 * (la - lc) / denom), -0.5, 0.5))


def _axis_offset(line, i):
    if 0 < i < len(line) - 1:
        return _subcell(line[i - 1], line[i], line[i + 1])
    return _edge_subcell(line, i)


def decode_keypoints(heatmaps, stride=OUTPUT_STRIDE):
    """Argmax per joint with a 3-point quadratic refinement on each axis.

    Interior peaks fit a parabola to the values; edge peaks use the one-sided
    fit of ``_edge_subcell``.
    """
    h = np.asarray(heatmaps, dtype=np.float64)
    if h.ndim != 3:
        raise ValueError(f"expected J x h x w heatmaps, got shape {h.shape}")
    j, rows, cols = h.shape
    uv = np.empty((j, 2))
    conf = np.empty(j)
    visible = np.empty(j, dtype=bool)
    flat = h.reshape(j, -1)
    idx = np.argmax(flat, axis=1)  # first maximum in row-major order
    for k in range(j):
        peak = flat[k, idx[k]]
        if not np.isfinite(peak) or peak <= 0.0:
            uv[k] = (cols * stride / 2.0, rows * stride / 2.0)
            conf[k] = 0.0
            visible[k] = False
            continue
        r, c = divmod(int(idx[k]), cols)
        dc = _axis_offset(h[k, r], c)
        dr = _axis_offset(h[k, :, c], r)
        uv[k] = ((c + 0.5 + dc) * stride, (r + 0.5 + dr) * stride)
        conf[k] = peak
        visible[k] = True
    return Keypoints2D(uv, conf, visible)


def keypoint_cells(keypoints, map_shape, stride=OUTPUT_STRIDE):
    rows, cols = map_shape
    c = np.clip(np.floor(keypoints.uv[:, 0] / stride).astype(np.int64), 0, cols - 1)
    r = np.clip(np.floor(keypoints.uv[:, 1] / stride).astype(np.int64), 0, rows - 1)
    return r, c


def decode_pose(locmaps, keypoints, stride=OUTPUT_STRIDE, root=0):
    """Read X/Y/Z at each keypoint's cell and subtract the root reading.

    ``locmaps`` is a 3 x J x h x w array (or an (X, Y, Z) triple). Invisible
    joints get the root's coordinates, i.e. zeros; ``keypoints.visible``
    flags them.
    """
    lm = np.stack([np.asarray(m, dtype=np.float64) for m in locmaps])
    if lm.ndim != 4 or lm.shape[0] != 3 or lm.shape[1] != len(keypoints):
        raise ValueError(f"expected 3 x {len(keypoints)} x h x w locmaps, got shape {lm.shape}")
    r, c = keypoint_cells(keypoints, lm.shape[2:], stride)
    joints = np.arange(lm.shape[1])
    raw = lm[:, joints, r, c].T  # J x 3
    pose = raw - raw[root]
    pose[~keypoints.visible] = 0.0
    pose[root] = 0.0
    return pose


@dataclass
class BBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box extents must be positive, got {self.w} x {self.h}")

    def as_array(self):
        return np.array([self.cx, self.cy, self.w, self.h])

    def corners(self):
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)


def bbox_from_keypoints(keypoints, buffer_x=BUFFER_X, buffer_y=BUFFER_Y):
    """Tight box of visible keypoints, widened per side by the buffer fractions."""
    pts = keypoints.uv[keypoints.visible]
    if len(pts) < 2:
        raise TrackingLost(f"{len(pts)} visible keypoints, need at least 2")
    x0, y0 = pts.min(axis=0)
    x1, y1 = pts.max(axis=0)
    w, h = x1 - x0, y1 - y0
    if w <= 0 or h <= 0:
        raise TrackingLost(f"degenerate keypoint extent {w} x {h}")
    return BBox((x0 + x1) / 2, (y0 + y1) / 2, w * (1 + 2 * buffer_x), h * (1 + 2 * buffer_y))


@dataclass
class TrackerState:
    box: BBox = None
    momentum: float = MOMENTUM
    initialized: bool = False

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")


def track(state, observed):
    """EMA on box center and extents; the first observation is adopted as is."""
    if not state.initialized:
        state.box = BBox(observed.cx, observed.cy, observed.w, observed.h)
        state.initialized = True
        return state.box
    m = state.momentum
    prev = state.box.as_array()
    # increment form: a repeated observation is a bit-exact fixed point
    new = prev + (1.0 - m) * (observed.as_array() - prev)
    state.box = BBox(*new)
    return state.box


@dataclass
class CropTransform:
    """Affine map crop px -> frame px: x = a u + b v + tx, y = c u + d v + ty."""

    coeffs: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]))

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)

    def matrix(self):
        a, b, tx, c, d, ty = self.coeffs
        return np.array([[a, b, tx], [c, d, ty], [0.0, 0.0, 1.0]])

    def to_frame(self, uv):
        uv = np.asarray(uv, dtype=np.float64)
        a, b, tx, c, d, ty = self.coeffs
        return np.stack([a * uv[..., 0] + b * uv[..., 1] + tx, c * uv[..., 0] + d * uv[..., 1] + ty], axis=-1)

    def to_crop(self, xy):
        xy = np.asarray(xy, dtype=np.float64)
        a, b, tx, c, d, ty = self.coeffs
        det = a * d - b * c
        x, y = xy[..., 0] - tx, xy[..., 1] - ty
        return np.stack([(d * x - b * y) / det, (-c * x + a * y) / det], axis=-1)


def keypoints_to_frame(keypoints, transform):
    return Keypoints2D(transform.to_frame(keypoints.uv), keypoints.conf.copy(), keypoints.visible.copy())


def _sample_matrix(pos, n):
    """Rows of linear interpolation weights at continuous sample indices ``pos``."""
    pos = np.clip(pos, 0.0, n - 1.0)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, n - 1)
    f = pos - i0
    m = np.zeros((len(pos), n))
    rows = np.arange(len(pos))
    np.add.at(m, (rows, i0), 1.0 - f)
    np.add.at(m, (rows, i1), f)
    return m


def crop_resize(frame, box, size=256):
    """Square crop around ``box`` resampled to size x size.

    The square side is max(w, h), centered on the box; areas outside the frame
    repeat the edge pixels. Returns (1 x 3 x size x size float64 in the
    frame's value range, CropTransform).
    """
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 frame, got shape {frame.shape}")
    fh, fw = frame.shape[:2]
    x0, y0, x1, y1 = box.corners()
    if x1 <= 0 or y1 <= 0 or x0 >= fw or y0 >= fh:
        raise ValueError(f"box {box} lies outside the {fw}x{fh} frame")
    side = max(box.w, box.h)
    left, top = box.cx - side / 2, box.cy - side / 2
    scale = side / size
    centers = np.arange(size) + 0.5
    ry = _sample_matrix(top + centers * scale - 0.5, fh)
    rx = _sample_matrix(left + centers * scale - 0.5, fw)
    img = frame.astype(np.float64)
    out = np.stack([ry @ img[:, :, ch] @ rx.T for ch in range(3)])
    transform = CropTransform([scale, 0.0, left, 0.0, scale, top])
    return out[None], transform
