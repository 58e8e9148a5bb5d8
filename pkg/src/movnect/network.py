"""MoVNect variants: declarative spec, builder, forward pass and accounting.

Graph: MobileNetV2 inverted-residual base cut after block 12 (stride 16,
96 channels) -> Block13_a (depthwise 3x3 + pointwise pairs) -> linear
pointwise head giving dX, dY, dZ -> bone-length map BL = |dX|+|dY|+|dZ|
-> concat(Block13_a, dX/dY/dZ, BL) -> Block13_b -> one x2 upsampling stage
-> linear pointwise head split into H, X, Y, Z at output stride 8.
"""
import math
from collections import OrderedDict
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import tensor as T
from .weights import load_tensors, save_tensors

# (expansion, out channels, repeats, first stride), blocks 0..12
BASE_SCHEDULE = ((1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2), (6, 96, 3, 1))
STEM_CHANNELS = 32
BASE_STRIDE = 16
VARIANTS = ("TypeA", "TypeB", "TypeC")
UPSAMPLING = ("bilinear_conv", "transposed_conv")


@dataclass(frozen=True)
class NetworkSpec:
    variant: str = "TypeA"
    input_size: int = 256
    joint_count: int = 15
    block13a_widths: tuple = (368, 368, 256)
    block13b_widths: tuple = (192, 192, 128)
    upsampling: str = "bilinear_conv"
    output_stride: int = 8
    # X/Y/Z head channels are emitted in units of this many millimetres
    locmap_scale_mm: float = 100.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.upsampling not in UPSAMPLING:
            raise ValueError(f"upsampling must be one of {UPSAMPLING}, got {self.upsampling!r}")
        if self.output_stride != BASE_STRIDE // 2:
            raise ValueError(f"output_stride is fixed at {BASE_STRIDE // 2} (one x2 upsampling stage)")
        if self.input_size % BASE_STRIDE:
            raise ValueError(f"input_size must be a multiple of {BASE_STRIDE}, got {self.input_size}")
        if self.joint_count < 1:
            raise ValueError("joint_count must be >= 1")

    @property
    def map_size(self):
        return self.input_size // self.output_stride


PROFILES = {
    "type-a": NetworkSpec("TypeA", block13a_widths=(368, 368, 256), block13b_widths=(192, 192, 128)),
    "type-b": NetworkSpec(
        "TypeB", block13a_widths=(368, 368, 256), block13b_widths=(192, 192, 128), upsampling="transposed_conv"
    ),
    "type-c": NetworkSpec("TypeC", block13a_widths=(512, 512, 512), block13b_widths=(256, 256, 128)),
}


def profile(name, **overrides):
    """Named preset ("type-a", "type-b", "type-c", or "a"/"b"/"c") with overrides."""
    key = name.lower()
    if len(key) == 1:
        key = f"type-{key}"
    if key not in PROFILES:
        raise KeyError(f"unknown profile {name!r}; known: {sorted(PROFILES)}")
    return replace(PROFILES[key], **overrides)


def spec_to_config(spec):
    lines = []
    for f in fields(spec):
        v = getattr(spec, f.name)
        if isinstance(v, tuple):
            v = ", ".join(str(i) for i in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def spec_from_config(text):
    """Parse ``key = value`` lines; an optional ``profile`` key seeds the rest."""
    raw = OrderedDict()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        raw[k] = v
    base = profile(raw.pop("profile")) if "profile" in raw else NetworkSpec()
    kinds = {f.name: f.type for f in fields(NetworkSpec)}
    overrides = {}
    for k, v in raw.items():
        if k not in kinds:
            raise ValueError(f"unknown spec key {k!r}")
        default = getattr(base, k)
        if isinstance(default, tuple):
            overrides[k] = tuple(int(s) for s in v.split(","))
        elif isinstance(default, bool):
            overrides[k] = v.lower() in ("1", "true", "yes")
        elif isinstance(default, int):
            overrides[k] = int(v)
        elif isinstance(default, float):
            overrides[k] = float(v)
        else:
            overrides[k] = v
    return replace(base, **overrides)


@dataclass(frozen=True)
class ConvUnit:
    name: str
    kind: str  # conv | dw | pw | tconv
    cin: int
    cout: int
    k: int
    stride: int
    bn: bool
    act: str
    bias: bool
    in_stride: int  # input resolution relative to the image

    @property
    def out_stride(self):
        if self.kind == "tconv":
            return self.in_stride // self.stride
        return self.in_stride * self.stride

    def param_shapes(self):
        if self.kind == "dw":
            shapes = {"w": (self.cin, 1, self.k, self.k)}
        elif self.kind == "tconv":
            shapes = {"w": (self.cin, self.cout, self.k, self.k)}
        else:
            shapes = {"w": (self.cout, self.cin, self.k, self.k)}
        if self.bias:
            shapes["b"] = (self.cout,)
        if self.bn:
            for p in ("gamma", "beta", "mean", "var"):
                shapes[f"bn.{p}"] = (self.cout,)
        return shapes

    def macs(self, input_size):
        hi = input_size // self.in_stride
        if self.kind == "tconv":
            return hi * hi * self.cin * self.cout * self.k * self.k
        ho = -(-hi // self.stride)
        if self.kind == "dw":
            return ho * ho * self.cin * self.k * self.k
        return ho * ho * self.cin * self.cout * self.k * self.k


@dataclass
class Network:
    spec: NetworkSpec
    units: "OrderedDict[str, ConvUnit]"
    base_blocks: list  # [(unit names, residual)]
    block13a: list
    delta_head: str
    block13b: list
    upsample: list
    head: str
    params: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype):
        return replace(self, params=OrderedDict((k, v.astype(dtype)) for k, v in self.params.items()))

    def trainable_names(self):
        return [k for k in self.params if not (k.endswith(".bn.mean") or k.endswith(".bn.var"))]


@dataclass
class NetworkOutputs:
    """Eight maps with a shared spatial extent; leading batch axis kept by
    :func:`run` and dropped by :func:`forward`."""

    H: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    dX: np.ndarray
    dY: np.ndarray
    dZ: np.ndarray
    BL: np.ndarray

    def locmaps(self):
        return np.stack([self.X, self.Y, self.Z], axis=-4)


class WeightMismatch(ValueError):
    pass


def _layout(spec):
    units = OrderedDict()

    def unit(name, kind, cin, cout, k, stride, in_stride, bn=True, act="relu6", bias=False):
        units[name] = ConvUnit(name, kind, cin, cout, k, stride, bn, act, bias, in_stride)
        return name

    s = 1
    unit("base.stem", "conv", 3, STEM_CHANNELS, 3, 2, s)
    s = 2
    cin = STEM_CHANNELS
    blocks = []
    idx = 0
    for t, c, n, first_stride in BASE_SCHEDULE:
        for r in range(n):
            stride = first_stride if r == 0 else 1
            hidden = cin * t
            names = []
            if t != 1:
                names.append(unit(f"base.block{idx}.expand", "pw", cin, hidden, 1, 1, s))
            names.append(unit(f"base.block{idx}.dw", "dw", hidden, hidden, 3, stride, s))
            s *= stride
            names.append(unit(f"base.block{idx}.project", "pw", hidden, c, 1, 1, s, act="linear"))
            blocks.append((tuple(names), stride == 1 and cin == c))
            cin = c
            idx += 1
    assert s == BASE_STRIDE

    b13a = []
    for i, width in enumerate(spec.block13a_widths):
        b13a.append(unit(f"block13a.{i}.dw", "dw", cin, cin, 3, 1, s))
        b13a.append(unit(f"block13a.{i}.pw", "pw", cin, width, 1, 1, s))
        cin = width
    J = spec.joint_count
    delta = unit("delta_head", "pw", cin, 3 * J, 1, 1, s, bn=False, act="linear", bias=True)
    cin = cin + 3 * J + J
    b13b = []
    for i, width in enumerate(spec.block13b_widths):
        b13b.append(unit(f"block13b.{i}.dw", "dw", cin, cin, 3, 1, s))
        b13b.append(unit(f"block13b.{i}.pw", "pw", cin, width, 1, 1, s))
        cin = width
    if spec.upsampling == "bilinear_conv":
        up = [unit("upsample.conv", "conv", cin, cin, 3, 1, s // 2)]
    else:
        up = [unit("upsample.tconv", "tconv", cin, cin, 4, 2, s)]
    head = unit("head", "pw", cin, 4 * J, 1, 1, s // 2, bn=False, act="linear", bias=True)
    return units, blocks, b13a, delta, b13b, up, head


def _init_params(units, seed):
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for u in units.values():
        shapes = u.param_shapes()
        fan_in = u.k * u.k * (1 if u.kind == "dw" else u.cin)
        gain = 6.0 if u.act != "linear" else 3.0
        limit = math.sqrt(gain / fan_in)
        for key, shape in shapes.items():
            name = f"{u.name}.{key}"
            if key == "w":
                params[name] = rng.uniform(-limit, limit, size=shape)
            elif key in ("b", "bn.beta", "bn.mean"):
                params[name] = np.zeros(shape)
            else:  # bn.gamma, bn.var
                params[name] = np.ones(shape)
    return params


def build(spec, seed=0, weights=None, dtype=np.float32):
    """Realize ``spec``: seeded fan-in-uniform init, or tensors from ``weights``.

    ``weights`` may be a path to an MVNW file or a name -> array mapping.
    """
    units, blocks, b13a, delta, b13b, up, head = _layout(spec)
    net = Network(spec, units, blocks, b13a, delta, b13b, up, head)
    if weights is None:
        params = _init_params(units, seed)
    else:
        loaded = load_tensors(weights) if isinstance(weights, (str, bytes)) or hasattr(weights, "__fspath__") else weights
        params = OrderedDict()
        for u in units.values():
            for key, shape in u.param_shapes().items():
                name = f"{u.name}.{key}"
                if name not in loaded:
                    raise WeightMismatch(f"missing tensor {name!r}")
                if tuple(loaded[name].shape) != shape:
                    raise WeightMismatch(
                        f"tensor {name!r} has shape {tuple(loaded[name].shape)}, expected {shape}"
                    )
                params[name] = np.asarray(loaded[name])
        extra = [k for k in loaded if k not in params]
        if extra:
            raise WeightMismatch(f"unexpected tensor {extra[0]!r}")
    net.params = OrderedDict((k, np.ascontiguousarray(v, dtype=dtype)) for k, v in params.items())
    return net


def save_weights(net, path):
    save_tensors(path, net.params)


def detect_spec(weights, input_size=256):
    """Find the preset whose tensor names and shapes match ``weights``."""
    loaded = load_tensors(weights) if not isinstance(weights, dict) else weights
    for name, spec in PROFILES.items():
        spec = replace(spec, input_size=input_size)
        units = _layout(spec)[0]
        expected = {f"{u.name}.{k}": s for u in units.values() for k, s in u.param_shapes().items()}
        if len(expected) != len(loaded):
            continue
        if all(n in loaded and tuple(loaded[n].shape) == s for n, s in expected.items()):
            return spec
    raise WeightMismatch("weights do not match any known variant (type-a, type-b, type-c)")


def count_params(net):
    return int(sum(v.size for v in net.params.values()))


def count_flops(net, input_size=None):
    """Multiply-accumulate count of every conv-like layer for one image."""
    size = input_size or net.spec.input_size
    return int(sum(u.macs(size) for u in net.units.values()))


def per_cell_mflops(net, input_size=None):
    """MACs per output-map cell, in millions; a resolution-free cost figure."""
    size = input_size or net.spec.input_size
    cells = (size // net.spec.output_stride) ** 2
    return count_flops(net, size) / cells / 1e6


def bone_length_features(dx, dy, dz, tape=None):
    if not (dx.shape == dy.shape == dz.shape):
        raise ValueError(f"bone_length_features: shapes differ {dx.shape}, {dy.shape}, {dz.shape}")
    a = T.add(T.absolute(dx, tape=tape), T.absolute(dy, tape=tape), tape=tape)
    return T.add(a, T.absolute(dz, tape=tape), tape=tape)


def _run_unit(u, x, params, training, tape, stats):
    p = lambda key: params[f"{u.name}.{key}"]  # noqa: E731
    b = p("b") if u.bias else None
    if u.kind == "conv":
        y = T.conv2d(x, p("w"), b, u.stride, "same", tape=tape)
    elif u.kind == "pw":
        y = T.pointwise_conv2d(x, p("w"), b, tape=tape)
    elif u.kind == "dw":
        y = T.depthwise_conv2d(x, p("w"), b, u.stride, "same", tape=tape)
    else:
        y = T.transposed_conv2d(x, p("w"), u.stride, "same", tape=tape)
        if b is not None:
            y = y + b[None, :, None, None].astype(y.dtype)
    if u.bn:
        if training:
            y, mean, var = T.batchnorm_train(y, p("bn.gamma"), p("bn.beta"), tape=tape)
            stats[u.name] = (mean, var)
        else:
            y = T.batchnorm(y, p("bn.mean"), p("bn.var"), p("bn.gamma"), p("bn.beta"), tape=tape)
    return T.activation(y, u.act, tape=tape)


def run_base(net, x, training=False, tape=None, params=None, stats=None):
    """Base network only: N x 3 x S x S -> N x 96 x S/16 x S/16 features."""
    params = net.params if params is None else params
    stats = {} if stats is None else stats
    unit = lambda name, v: _run_unit(net.units[name], v, params, training, tape, stats)  # noqa: E731
    h = unit("base.stem", x)
    for names, residual in net.base_blocks:
        y = h
        for name in names:
            y = unit(name, y)
        h = T.add(h, y, tape=tape) if residual else y
    return h


def run_head(net, features, training=False, tape=None, params=None, stats=None):
    """Everything after the base, from its stride-16 features to the eight maps."""
    params = net.params if params is None else params
    stats = {} if stats is None else stats
    spec = net.spec
    J = spec.joint_count
    unit = lambda name, v: _run_unit(net.units[name], v, params, training, tape, stats)  # noqa: E731

    a = features
    for name in net.block13a:
        a = unit(name, a)
    d = unit(net.delta_head, a)
    dx = T.channel_slice(d, 0, J, tape=tape)
    dy = T.channel_slice(d, J, 2 * J, tape=tape)
    dz = T.channel_slice(d, 2 * J, 3 * J, tape=tape)
    bl = bone_length_features(dx, dy, dz, tape=tape)
    f = T.concat([a, d, bl], tape=tape)
    for name in net.block13b:
        f = unit(name, f)
    if spec.upsampling == "bilinear_conv":
        f = T.bilinear_resize(f, 2 * f.shape[2], 2 * f.shape[3], tape=tape)
    for name in net.upsample:
        f = unit(name, f)
    out = unit(net.head, f)
    H = T.channel_slice(out, 0, J, tape=tape)
    locs = [
        T.scale(T.channel_slice(out, (i + 1) * J, (i + 2) * J, tape=tape), spec.locmap_scale_mm, tape=tape)
        for i in range(3)
    ]
    size = out.shape[2:]
    up = lambda m: T.bilinear_resize(m, size[0], size[1]) if m.shape[2:] != size else m  # noqa: E731
    # intermediates reported at output resolution; the graph itself uses them at stride 16
    return NetworkOutputs(H, *locs, up(dx), up(dy), up(dz), up(bl))


def run(net, x, training=False, tape=None, params=None):
    """Batched forward pass over an N x 3 x S x S input.

    Returns (NetworkOutputs with batch axis, batch BN statistics). With
    ``training`` the batchnorm layers use batch statistics; the returned
    dict maps unit name -> (mean, var) for running-average updates.
    """
    stats = {}
    h = run_base(net, x, training, tape, params, stats)
    return run_head(net, h, training, tape, params, stats), stats


def forward(net, image):
    """Single-image inference: image is 1 x 3 x S x S, values in [-1, 1]."""
    S = net.spec.input_size
    if image.shape != (1, 3, S, S):
        raise ValueError(f"forward expects input of shape (1, 3, {S}, {S}), got {image.shape}")
    outputs, _ = run(net, np.asarray(image, dtype=net.dtype))
    return NetworkOutputs(*(getattr(outputs, f.name)[0] for f in fields(NetworkOutputs)))


def normalize_image(rgb_bytes):
    """H x W x 3 uint8 (or 0..255 floats) -> 1 x 3 x H x W in [-1, 1]."""
    x = np.asarray(rgb_bytes, dtype=np.float64) / 127.5 - 1.0
    return x.transpose(2, 0, 1)[None]


def fold_network(net):
    """Inference copy with every batchnorm merged into its preceding conv."""
    units = OrderedDict()
    params = OrderedDict()
    for u in net.units.values():
        p = {k: net.params[f"{u.name}.{k}"] for k in u.param_shapes()}
        if u.bn:
            w = p["w"]
            if u.kind == "tconv":
                w_t = np.ascontiguousarray(w.transpose(1, 0, 2, 3))
                wf, bf = T.fold_batchnorm(w_t, p.get("b"), p["bn.mean"], p["bn.var"], p["bn.gamma"], p["bn.beta"])
                wf = np.ascontiguousarray(wf.transpose(1, 0, 2, 3))
            else:
                wf, bf = T.fold_batchnorm(w, p.get("b"), p["bn.mean"], p["bn.var"], p["bn.gamma"], p["bn.beta"])
            u = replace(u, bn=False, bias=True)
            params[f"{u.name}.w"] = wf
            params[f"{u.name}.b"] = bf
        else:
            for k, v in p.items():
                params[f"{u.name}.{k}"] = v
        units[u.name] = u
    return replace(net, units=units, params=params)
