"""Mimicry losses, ground-truth map synthesis, the synthetic dataset and the
teacher-student training loop.

Losses take student maps plus ground-truth and teacher targets and blend the
two residual norms by ``alpha``; with a tape they record one node whose
gradient flows to the student maps only.
"""
import colorsys
import csv
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from . import network as N
from . import quat
from . import tensor as T
from .decode import OUTPUT_STRIDE, decode_keypoints, decode_pose
from .skeleton import Skeleton, SkeletonPose, clamp_limits, default_limits, forward_kinematics, random_pose
from .weights import load_tensors, save_tensors

NORM_EPS = 1e-12
HEATMAP_SIGMA = 2.0  # cells at map resolution


class DivergenceError(RuntimeError):
    def __init__(self, step, value):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


# ---------------------------------------------------------------- losses


def _norms(r, squared):
    """Per-map norm over the last two axes and its gradient w.r.t. ``r``."""
    ss = np.einsum("...hw,...hw->...", r, r)
    if squared:
        return ss, 2.0 * r
    val = np.sqrt(ss)
    inv = np.where(ss > 0, 1.0 / np.sqrt(ss + NORM_EPS), 0.0)
    return val, r * inv[..., None, None]


def _check_alpha(alpha, teacher):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if teacher is None and alpha != 1.0:
        raise ValueError("teacher targets are required unless alpha == 1")


def heatmap_loss(H, H_GT, H_T, alpha, squared=False, tape=None):
    """(1/J) sum_j [alpha |H_j - H_j^GT| + (1 - alpha) |H_j - H_j^T|].

    Maps are J x h x w or N x J x h x w; batches average the per-sample loss.
    ``H_T`` may be None when alpha == 1.
    """
    _check_alpha(alpha, H_T)
    H_GT = np.asarray(H_GT, dtype=np.float64)
    if H.shape != H_GT.shape or (H_T is not None and np.shape(H_T) != H.shape):
        raise ValueError(
            f"heatmap_loss: extents differ: H {H.shape}, H_GT {H_GT.shape}, "
            f"H_T {None if H_T is None else np.shape(H_T)}"
        )
    if H.ndim not in (3, 4):
        raise ValueError(f"heatmap_loss: expected J x h x w maps, got shape {H.shape}")
    J = H.shape[-3]
    batch = H.shape[0] if H.ndim == 4 else 1
    n_gt, g_gt = _norms(H - H_GT, squared)
    total = alpha * n_gt
    grad = alpha * g_gt
    if alpha != 1.0:
        n_t, g_t = _norms(H - np.asarray(H_T, dtype=np.float64), squared)
        total = total + (1.0 - alpha) * n_t
        grad = grad + (1.0 - alpha) * g_t
    value = np.asarray(total.sum() / (J * batch))
    grad = grad / (J * batch)
    return T._record(tape, value, [H], lambda g, needs: (grad * float(g),))


def locmap_loss(L, L_GT, L_T, H_GT, alpha, squared=False, tape=None):
    """sum_f sum_j [alpha |H_j^GT . (L_fj - L_fj^GT)| + (1 - alpha) |H_j^GT . (L_fj - L_fj^T)|].

    ``L`` is a ``[..., 3, J, h, w]`` array or an (X, Y, Z) triple of
    ``[..., J, h, w]`` arrays (the triple keeps each family differentiable on
    a tape). Targets use the array layout. No 1/J factor; batches average.
    """
    _check_alpha(alpha, L_T)
    fams = list(L) if isinstance(L, (tuple, list)) else None
    shape = (fams[0].shape[:-3] + (3,) + fams[0].shape[-3:]) if fams else L.shape
    if fams and any(f.shape != fams[0].shape for f in fams) or (fams and len(fams) != 3):
        raise ValueError("locmap_loss: expected three families of equal extents")
    L_GT = np.asarray(L_GT, dtype=np.float64)
    H_GT = np.asarray(H_GT, dtype=np.float64)
    if L_GT.shape != shape or (L_T is not None and np.shape(L_T) != shape):
        raise ValueError(
            f"locmap_loss: extents differ: L {shape}, L_GT {L_GT.shape}, "
            f"L_T {None if L_T is None else np.shape(L_T)}"
        )
    if len(shape) not in (4, 5) or shape[-4] != 3 or H_GT.shape != shape[:-4] + shape[-3:]:
        raise ValueError(f"locmap_loss: mask shape {H_GT.shape} does not match locmaps {shape}")
    if np.any(H_GT < 0):
        raise ValueError("locmap_loss: H_GT must be non-negative")
    batch = shape[0] if len(shape) == 5 else 1
    Ls = np.stack(fams, axis=-4) if fams else np.asarray(L)
    M = H_GT[..., None, :, :, :]
    n_gt, g_gt = _norms(M * (Ls - L_GT), squared)
    total = alpha * n_gt
    grad = alpha * g_gt
    if alpha != 1.0:
        n_t, g_t = _norms(M * (Ls - np.asarray(L_T, dtype=np.float64)), squared)
        total = total + (1.0 - alpha) * n_t
        grad = grad + (1.0 - alpha) * g_t
    value = np.asarray(total.sum() / batch)
    grad = M * grad / batch
    if fams:
        inputs = fams
        grad_fn = lambda g, needs: [grad[..., i, :, :, :] * float(g) for i in range(3)]  # noqa: E731
    else:
        inputs = [L]
        grad_fn = lambda g, needs: (grad * float(g),)  # noqa: E731
    return T._record(tape, value, inputs, grad_fn)


def mpjpe(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"mpjpe: shapes differ {pred.shape} vs {gt.shape}")
    return float(np.mean(np.linalg.norm(pred - gt, axis=-1)))


# ---------------------------------------------------------------- ground truth


def make_gt_heatmap(keypoint, map_extent, sigma=HEATMAP_SIGMA, stride=OUTPUT_STRIDE):
    """Gaussian bump (sigma in map cells) centered on the keypoint, peak cell = 1.

    Returns (map, visible); keypoints outside the crop give a zero map.
    """
    h, w = map_extent
    u, v = float(keypoint[0]), float(keypoint[1])
    if not (0 <= u < w * stride and 0 <= v < h * stride):
        return np.zeros((h, w)), False
    cu, cv = u / stride - 0.5, v / stride - 0.5
    gx = np.exp(-((np.arange(w) - cu) ** 2) / (2 * sigma * sigma))
    gy = np.exp(-((np.arange(h) - cv) ** 2) / (2 * sigma * sigma))
    g = np.outer(gy / gy.max(), gx / gx.max())
    return g, True


def make_gt_heatmaps(keypoints, map_extent, sigma=HEATMAP_SIGMA, stride=OUTPUT_STRIDE):
    maps, vis = zip(*(make_gt_heatmap(k, map_extent, sigma, stride) for k in keypoints))
    return np.stack(maps), np.array(vis)


def make_gt_locmaps(pose, map_extent, root=0):
    """Constant maps holding each joint's root-relative coordinate (3 x J x h x w)."""
    pose = np.asarray(pose, dtype=np.float64)
    if np.any(pose[root] != 0):
        raise ValueError(f"root row must be (0, 0, 0), got {pose[root]}")
    h, w = map_extent
    return np.ascontiguousarray(np.broadcast_to(pose.T[:, :, None, None], (3, len(pose), h, w)))


# ---------------------------------------------------------------- synthetic data


@dataclass
class SupervisionSample:
    image: np.ndarray  # 1 x 3 x S x S float32 in [-1, 1]
    gt_heatmaps: np.ndarray  # J x h x w
    gt_locmaps: np.ndarray  # 3 x J x h x w, mm
    gt_pose: np.ndarray  # J x 3, mm, root-relative
    gt_keypoints: np.ndarray  # J x 2, crop px
    translation: np.ndarray  # camera-space root position, mm
    focal: float

    @property
    def principal_point(self):
        s = self.image.shape[-1]
        return np.array([s / 2.0, s / 2.0])


def _palette(n):
    return np.array([colorsys.hsv_to_rgb(k / n, 0.9, 1.0) for k in range(n)])


def project(points, translation, focal, principal_point):
    cam = np.asarray(points, dtype=np.float64) + translation
    return focal * cam[:, :2] / cam[:, 2:3] + principal_point


def _segment_coverage(px, py, a, b, half):
    d = b - a
    len2 = float(d @ d)
    if len2 == 0:
        t = np.zeros_like(px)
    else:
        t = np.clip(((px - a[0]) * d[0] + (py - a[1]) * d[1]) / len2, 0.0, 1.0)
    dist = np.hypot(px - (a[0] + t * d[0]), py - (a[1] + t * d[1]))
    return np.clip(half + 0.5 - dist, 0.0, 1.0)


def render(uv, depth, parents, size, focal, rng):
    """Anti-aliased stick figure over a random gradient background, HxWx3 in [0, 1]."""
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    c0, c1 = rng.uniform(0.0, 1.0, size=(2, 3))
    ang = rng.uniform(0, 2 * np.pi)
    ramp = ((xs * np.cos(ang) + ys * np.sin(ang)) / size + 1.0) / 2.0
    img = c0 * (1 - ramp[..., None]) + c1 * ramp[..., None]
    img = img + rng.normal(0.0, 0.03, size=img.shape)
    colors = _palette(len(parents))
    half = max(0.75, 0.5 * focal * 60.0 / float(np.mean(depth)))
    bones = [j for j, p in enumerate(parents) if p >= 0]
    order = sorted(bones, key=lambda j: -(depth[j] + depth[parents[j]]))
    for j in order:
        cov = _segment_coverage(xs, ys, uv[parents[j]], uv[j], half)[..., None]
        img = img * (1 - cov) + colors[j] * cov
    for j in np.argsort(-depth):
        cov = _segment_coverage(xs, ys, uv[j], uv[j], 1.3 * half)[..., None]
        img = img * (1 - cov) + colors[j] * cov
    return np.clip(img, 0.0, 1.0)


def synth_sample(rng, input_size=256, skeleton=None, limits=None, focal=None, margin=2.0):
    skeleton = skeleton or Skeleton()
    limits = limits or default_limits()
    S = input_size
    f = 1.2 * S if focal is None else float(focal)
    pp = np.array([S / 2.0, S / 2.0])
    stride = OUTPUT_STRIDE
    m = S // stride
    for _ in range(100):
        rot = random_pose(skeleton, limits, rng)
        pose = forward_kinematics(skeleton, rot)
        scale = rng.uniform(0.7, 1.0)
        extent = float(np.max(pose[:, :2].max(axis=0) - pose[:, :2].min(axis=0)))
        tz = f * extent / (0.8 * scale * S) - float(pose[:, 2].mean())
        center = (pose[:, :2].max(axis=0) + pose[:, :2].min(axis=0)) / 2
        jitter = rng.uniform(-0.05, 0.05, size=2) * S * tz / f
        t = np.array([-center[0] + jitter[0], -center[1] + jitter[1], tz])
        cam = pose + t
        if np.any(cam[:, 2] < 100):
            continue
        uv = project(pose, t, f, pp)
        if np.all(uv >= margin) and np.all(uv <= S - margin):
            break
    else:  # pragma: no cover - acceptance rate is near one
        raise RuntimeError("could not place a figure inside the crop")
    img = render(uv, cam[:, 2], skeleton.parents, S, f, rng)
    gamma = rng.uniform(0.7, 1.4)
    img = img ** gamma
    image = (img.transpose(2, 0, 1)[None] * 2.0 - 1.0).astype(np.float32)
    heat, _ = make_gt_heatmaps(uv, (m, m), stride=stride)
    return SupervisionSample(
        image=image,
        gt_heatmaps=heat,
        gt_locmaps=make_gt_locmaps(pose, (m, m)),
        gt_pose=pose,
        gt_keypoints=uv,
        translation=t,
        focal=f,
    )


def synth_dataset(n, seed, input_size=256, focal=None):
    """``n`` samples; each draws from its own child of SeedSequence(seed)."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    skeleton, limits = Skeleton(), default_limits()
    children = np.random.SeedSequence(seed).spawn(n)
    return [synth_sample(np.random.default_rng(c), input_size, skeleton, limits, focal) for c in children]


def synth_motion(n_frames, seed, fps=30.0, period_s=8.0, spread=0.3, skeleton=None, limits=None):
    """Smooth back-and-forth motion between two random in-limit poses.

    Returns (timestamps s, T x J x 4 parent-relative rotations, T x J x 3
    root-relative joints mm).
    """
    skeleton = skeleton or Skeleton()
    limits = limits or default_limits()
    rng = np.random.default_rng(seed)
    a = random_pose(skeleton, limits, rng, spread=spread)
    b = random_pose(skeleton, limits, rng, spread=spread)
    ts = np.arange(n_frames) / fps
    s = 0.5 - 0.5 * np.cos(2 * np.pi * ts / period_s)
    rots = np.stack([
        clamp_limits(skeleton, SkeletonPose(quat.slerp(a, b, np.full(len(a), si))), limits).rotations for si in s
    ])
    return ts, rots, np.stack([forward_kinematics(skeleton, r) for r in rots])


def synth_sequence(n_frames, seed, size=192, focal=None, fps=30.0):
    """Rendered frames of ``synth_motion`` seen by a static camera.

    Returns (timestamps s, list of size x size x 3 uint8 frames, T x J x 3
    root-relative joints mm, T x J x 2 frame keypoints px, translation mm, focal px).
    """
    skeleton = Skeleton()
    ts, _, poses = synth_motion(n_frames, seed, fps=fps, skeleton=skeleton)
    f = 1.2 * size if focal is None else float(focal)
    pp = np.array([size / 2.0, size / 2.0])
    lo, hi = poses[..., :2].min(axis=(0, 1)), poses[..., :2].max(axis=(0, 1))
    tz = f * float(np.max(hi - lo)) / (0.6 * size) - float(poses[..., 2].mean())
    t = np.array([-(lo[0] + hi[0]) / 2, -(lo[1] + hi[1]) / 2, tz])
    frames, uvs = [], []
    for pose in poses:
        uv = project(pose, t, f, pp)
        # same background every frame: the camera does not move
        img = render(uv, pose[:, 2] + t[2], skeleton.parents, size, f, np.random.default_rng(seed))
        frames.append(np.round(img * 255).astype(np.uint8))
        uvs.append(uv)
    return ts, frames, poses, np.stack(uvs), t, f


_SAMPLE_FIELDS = ("image", "gt_heatmaps", "gt_locmaps", "gt_pose", "gt_keypoints", "translation")


def save_dataset(directory, samples):
    os.makedirs(directory, exist_ok=True)
    for k, s in enumerate(samples):
        tensors = {name: getattr(s, name) for name in _SAMPLE_FIELDS}
        tensors["focal"] = np.array([s.focal])
        save_tensors(os.path.join(directory, f"sample_{k:06d}.mvnw"), tensors)


def load_dataset(directory):
    names = sorted(f for f in os.listdir(directory) if f.endswith(".mvnw"))
    out = []
    for name in names:
        t = load_tensors(os.path.join(directory, name))
        missing = [k for k in _SAMPLE_FIELDS + ("focal",) if k not in t]
        if missing:
            raise ValueError(f"{name}: missing tensors {missing}")
        out.append(SupervisionSample(**{k: t[k] for k in _SAMPLE_FIELDS}, focal=float(t["focal"][0])))
    return out


# ---------------------------------------------------------------- optimizers


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            m = self.m.setdefault(name, np.zeros(g.size))
            v = self.v.setdefault(name, np.zeros(g.size))
            kernels.adam_update(params[name].reshape(-1), np.ascontiguousarray(g).reshape(-1), m, v,
                                self.lr, self.beta1, self.beta2, self.eps, c1, c2)


class RMSProp:
    def __init__(self, lr, rho=0.9, eps=1e-7):
        self.lr, self.rho, self.eps = lr, rho, eps
        self.v = {}

    def step(self, params, grads):
        for name, g in grads.items():
            v = self.v.setdefault(name, np.zeros_like(g))
            v *= self.rho
            v += (1.0 - self.rho) * g * g
            params[name] -= self.lr * g / (np.sqrt(v) + self.eps)


OPTIMIZERS = {"adam": Adam, "rmsprop": RMSProp}


# ---------------------------------------------------------------- training


@dataclass
class DistillConfig:
    alpha: float = 0.5
    learning_rate: float = 2.5e-4
    batch_size: int = 4
    optimizer: str = "adam"
    epochs: int = 20
    seed: int = 0
    squared_norm: bool = False
    freeze_base: bool = False
    heatmap_only: bool = False
    bn_momentum: float = 0.9

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {sorted(OPTIMIZERS)}, got {self.optimizer!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_mpjpe_mm: float
    wall_ms: float


@dataclass
class Batch:
    """Stacked training arrays; ``inputs`` are images or precomputed base features."""

    inputs: np.ndarray
    heatmaps: np.ndarray
    locmaps: np.ndarray
    poses: np.ndarray
    teacher_heatmaps: np.ndarray = None
    teacher_locmaps: np.ndarray = None

    def __len__(self):
        return len(self.inputs)

    def take(self, idx):
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return Batch(*(pick(getattr(self, f)) for f in
                       ("inputs", "heatmaps", "locmaps", "poses", "teacher_heatmaps", "teacher_locmaps")))


def stack_images(samples):
    return np.concatenate([s.image for s in samples]).astype(np.float64)


def base_features(net, images, batch_size=64):
    """Inference-mode base features for every image, float64."""
    out = [N.run_base(net, images[k : k + batch_size]) for k in range(0, len(images), batch_size)]
    return np.concatenate(out)


def calibrate_base(net, images):
    """Set every base batchnorm's running statistics from one batch pass."""
    stats = {}
    N.run_base(net, images, training=True, stats=stats)
    for name, (mean, var) in stats.items():
        net.params[f"{name}.bn.mean"][...] = mean
        net.params[f"{name}.bn.var"][...] = var
    return net


def predict(net, inputs, from_features=False, batch_size=64):
    """Stacked (H, locmaps) for a batch of images or base features."""
    hs, ls = [], []
    for k in range(0, len(inputs), batch_size):
        x = inputs[k : k + batch_size]
        outs = N.run_head(net, x) if from_features else N.run(net, x)[0]
        hs.append(outs.H)
        ls.append(outs.locmaps())
    return np.concatenate(hs), np.concatenate(ls)


def evaluate_mpjpe(net, inputs, poses, from_features=False, stride=OUTPUT_STRIDE):
    """Mean MPJPE (mm) of decoded predictions against ground-truth poses."""
    H, L = predict(net, inputs, from_features)
    errs = [mpjpe(decode_pose(L[k], decode_keypoints(H[k], stride), stride), poses[k]) for k in range(len(H))]
    return float(np.mean(errs))


def make_batch(samples, inputs=None, teacher=None):
    return Batch(
        inputs=stack_images(samples) if inputs is None else inputs,
        heatmaps=np.stack([s.gt_heatmaps for s in samples]),
        locmaps=np.stack([s.gt_locmaps for s in samples]),
        poses=np.stack([s.gt_pose for s in samples]),
        teacher_heatmaps=None if teacher is None else teacher[0],
        teacher_locmaps=None if teacher is None else teacher[1],
    )


def train(student_spec, teacher, data, cfg, val=None, init=None, log=None):
    """Train a student on ``data`` (a Batch or a list of SupervisionSample).

    ``teacher`` is a Network, or None for ground-truth-only training (alpha
    is then forced to 1); teacher targets precomputed in the Batch take
    precedence. With ``cfg.freeze_base`` the Batch inputs must be base
    features and only the layers after the base are updated; ``init`` supplies
    starting parameters (e.g. a shared calibrated base).
    Returns (Network, list of EpochMetrics).
    """
    if not isinstance(data, Batch):
        data = make_batch(data)
    if val is not None and not isinstance(val, Batch):
        val = make_batch(val)
    alpha = cfg.alpha
    if teacher is None and data.teacher_heatmaps is None:
        alpha = 1.0
    elif data.teacher_heatmaps is None:
        if teacher.spec.map_size != student_spec.map_size:
            raise ValueError(
                f"teacher maps {teacher.spec.map_size} differ from student maps {student_spec.map_size}"
            )
        t64 = teacher.astype(np.float64)
        data = replace(data, **dict(zip(("teacher_heatmaps", "teacher_locmaps"),
                                        predict(t64, data.inputs, cfg.freeze_base))))
    net = N.build(student_spec, seed=cfg.seed, dtype=np.float64)
    if init is not None:
        for name, arr in init.items():
            if name in net.params:
                net.params[name][...] = arr
    params = net.params
    names = [k for k in net.trainable_names() if not (cfg.freeze_base and k.startswith("base."))]
    opt = OPTIMIZERS[cfg.optimizer](cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    n = len(data)
    metrics = []
    step = 0
    mom = cfg.bn_momentum
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        losses = []
        for k in range(0, n - cfg.batch_size + 1, cfg.batch_size):
            b = data.take(order[k : k + cfg.batch_size])
            tape = T.Tape()
            for name in names:
                tape.watch(name, params[name])
            stats = {}
            if cfg.freeze_base:
                outs = N.run_head(net, b.inputs, training=True, tape=tape, stats=stats)
            else:
                outs, stats = N.run(net, b.inputs, training=True, tape=tape)
            lh = heatmap_loss(outs.H, b.heatmaps, b.teacher_heatmaps, alpha, cfg.squared_norm, tape=tape)
            if cfg.heatmap_only:
                loss = lh
            else:
                ll = locmap_loss((outs.X, outs.Y, outs.Z), b.locmaps, b.teacher_locmaps, b.heatmaps, alpha,
                                 cfg.squared_norm, tape=tape)
                loss = T.add(lh, ll, tape=tape)
            value = float(loss)
            if not np.isfinite(value):
                raise DivergenceError(step, value)
            grads = T.backward(tape, loss)
            opt.step(params, grads)
            for unit, (mean, var) in stats.items():
                rm, rv = params[f"{unit}.bn.mean"], params[f"{unit}.bn.var"]
                rm *= mom
                rm += (1.0 - mom) * mean
                rv *= mom
                rv += (1.0 - mom) * var
            losses.append(value)
            step += 1
        val_mpjpe = float("nan") if val is None else evaluate_mpjpe(net, val.inputs, val.poses, cfg.freeze_base)
        m = EpochMetrics(epoch, float(np.mean(losses)) if losses else float("nan"), val_mpjpe,
                         (time.perf_counter() - t0) * 1e3)
        metrics.append(m)
        if log is not None:
            log(m)
    return net, metrics


def write_metrics(path, metrics):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_mpjpe_mm", "wall_ms"])
        for m in metrics:
            w.writerow([m.epoch, repr(m.train_loss), repr(m.val_mpjpe_mm), f"{m.wall_ms:.1f}"])


# ---------------------------------------------------------------- toy experiment


@dataclass
class ExperimentConfig:
    """Teacher (TypeC) then paired TypeA students (alpha = 1 vs ``alpha``) per seed."""

    alpha: float = 0.5
    learning_rate: float = 1e-3
    batch_size: int = 16
    optimizer: str = "adam"
    epochs: int = 20
    teacher_epochs: int = 20
    seeds: tuple = (0, 1, 2, 3, 4)
    train_samples: int = 2000
    val_samples: int = 200
    input_size: int = 32
    data_seed: int = 1234
    base_seed: int = 7
    squared_norm: bool = False
    calibration_samples: int = 256
    student: str = "type-a"
    teacher: str = "type-c"


@dataclass
class RunResult:
    role: str
    alpha: float
    seed: int
    metrics: list
    net: object = field(repr=False, default=None)

    @property
    def final_mpjpe(self):
        return self.metrics[-1].val_mpjpe_mm if self.metrics else float("nan")


def parse_experiment_config(text):
    """``key = value`` lines (``#`` comments) into an ExperimentConfig."""
    kinds = {f.name: f.type for f in ExperimentConfig.__dataclass_fields__.values()}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        kind = kinds[key]
        if kind is tuple:
            values[key] = tuple(int(v) for v in raw.replace(",", " ").split())
        elif kind is bool:
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"config line {lineno}: {key} expects a boolean, got {raw!r}")
            values[key] = raw.lower() in ("true", "1", "yes")
        elif kind is int:
            values[key] = int(raw)
        elif kind is float:
            values[key] = float(raw)
        else:
            values[key] = raw
    cfg = ExperimentConfig(**values)
    DistillConfig(alpha=cfg.alpha, learning_rate=cfg.learning_rate, batch_size=cfg.batch_size,
                  optimizer=cfg.optimizer, epochs=cfg.epochs)
    return cfg


def run_experiment(cfg, log=None):
    """Two-stage recipe on synthetic data with a frozen, shared base.

    The base stands in for the pre-trained backbone: seeded init with its
    batchnorm statistics calibrated on training images, then frozen. Base
    features and teacher outputs are computed once and shared by every run;
    the paired students of one seed share init and batch order.
    Returns (list of RunResult, shared data dict).
    """
    say = log or (lambda msg: None)
    t0 = time.perf_counter()
    train_set = synth_dataset(cfg.train_samples, cfg.data_seed, cfg.input_size)
    val_set = synth_dataset(cfg.val_samples, cfg.data_seed + 1, cfg.input_size)
    say(f"data: {len(train_set)} train / {len(val_set)} val at {cfg.input_size}px "
        f"({time.perf_counter() - t0:.1f}s)")

    student_spec = N.profile(cfg.student, input_size=cfg.input_size)
    teacher_spec = N.profile(cfg.teacher, input_size=cfg.input_size)
    base_net = N.build(student_spec, seed=cfg.base_seed, dtype=np.float64)
    images = stack_images(train_set)
    calibrate_base(base_net, images[: cfg.calibration_samples])
    base = {k: v for k, v in base_net.params.items() if k.startswith("base.")}
    train_batch = make_batch(train_set, base_features(base_net, images))
    val_batch = make_batch(val_set, base_features(base_net, stack_images(val_set)))
    say(f"base features {train_batch.inputs.shape[1:]} ({time.perf_counter() - t0:.1f}s)")

    def run_cfg(alpha, seed, epochs):
        return DistillConfig(alpha=alpha, learning_rate=cfg.learning_rate, batch_size=cfg.batch_size,
                             optimizer=cfg.optimizer, epochs=epochs, seed=seed,
                             squared_norm=cfg.squared_norm, freeze_base=True)

    def report(role, alpha, seed):
        return lambda m: say(f"{role} alpha={alpha} seed={seed} epoch {m.epoch}: "
                             f"loss {m.train_loss:.4f} val {m.val_mpjpe_mm:.2f} mm ({m.wall_ms:.0f} ms)")

    results = []
    teacher, tm = train(teacher_spec, None, train_batch, run_cfg(1.0, cfg.base_seed, cfg.teacher_epochs),
                        val=val_batch, init=base, log=report("teacher", 1.0, cfg.base_seed))
    results.append(RunResult("teacher", 1.0, cfg.base_seed, tm, teacher))
    distill_batch = replace(train_batch, **dict(zip(("teacher_heatmaps", "teacher_locmaps"),
                                                    predict(teacher, train_batch.inputs, True))))
    for seed in cfg.seeds:
        for role, alpha, batch in (("student_gt", 1.0, train_batch), ("student_distill", cfg.alpha, distill_batch)):
            net, m = train(student_spec, None, batch, run_cfg(alpha, seed, cfg.epochs), val=val_batch,
                           init=base, log=report(role, alpha, seed))
            results.append(RunResult(role, alpha, seed, m, net))
    say(f"total {time.perf_counter() - t0:.1f}s")
    return results, {"train": train_batch, "val": val_batch, "base": base}


def summarize(results):
    """Per-seed final MPJPE pairs and the direction verdict."""
    gt = {r.seed: r.final_mpjpe for r in results if r.role == "student_gt"}
    dist = {r.seed: r.final_mpjpe for r in results if r.role == "student_distill"}
    seeds = sorted(set(gt) & set(dist))
    rows = [(s, gt[s], dist[s], gt[s] - dist[s]) for s in seeds]
    wins = sum(1 for r in rows if r[2] <= r[1])
    mean_gain = float(np.mean([r[3] for r in rows])) if rows else float("nan")
    return {"rows": rows, "wins": wins, "mean_improvement_mm": mean_gain}
