"""Declarative network construction, initialization and cost accounting.

A network is an :class:`Architecture` (input geometry plus an ordered tuple of
stateless block descriptors) and a flat parameter store mapping names to
float64 arrays. Blocks know their parameter shapes, how to run forward and
backward given the store, and how to describe themselves as
:class:`LayerSpec` rows for the counters.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T

Shape = Tuple[int, ...]


class SpecError(ValueError):
    """A network description violates a structural invariant."""


@dataclass(frozen=True)
class LayerSpec:
    """One countable operation instance."""

    name: str
    kind: str  # conv | pgconv | dwconv | pconv | shortcut-conv | output-conv | fc | se-fc | ...
    in_shape: Shape
    out_shape: Shape
    kernel: Tuple[int, int] = (1, 1)
    stride: int = 1
    groups: int = 1

    @property
    def in_channels(self) -> int:
        return self.in_shape[0]

    @property
    def out_channels(self) -> int:
        return self.out_shape[0]

    @property
    def params(self) -> int:
        if self.kind in CONV_KINDS:
            kh, kw = self.kernel
            return self.out_channels * (self.in_channels // self.groups) * kh * kw + self.out_channels
        if self.kind in FC_KINDS:
            return self.out_channels * self.in_channels + self.out_channels
        return 0

    @property
    def macs(self) -> int:
        if self.kind in CONV_KINDS:
            kh, kw = self.kernel
            _, oh, ow = self.out_shape
            return oh * ow * self.out_channels * (self.in_channels // self.groups) * kh * kw
        if self.kind in FC_KINDS:
            return self.in_channels * self.out_channels
        if self.kind in ("scale", "residual-add", "gap"):
            return int(np.prod(self.in_shape))
        return 0

    @property
    def elementwise_ops(self) -> int:
        if self.kind in ("relu", "sigmoid", "softmax"):
            return int(np.prod(self.in_shape))
        return 0


CONV_KINDS = frozenset({"conv", "pgconv", "dwconv", "pconv", "shortcut-conv", "output-conv"})
FC_KINDS = frozenset({"fc", "se-fc"})


# ---------------------------------------------------------------------------
# blocks

def _act_forward(act, y):
    if act is None:
        return y
    if act == "relu":
        return T.relu(y)
    if act == "sigmoid":
        return T.sigmoid(y)
    raise SpecError(f"unknown activation {act!r}")


def _act_backward(act, pre, post, g):
    if act is None:
        return g
    if act == "relu":
        return T.relu_vjp(pre, g)["input"]
    return T.sigmoid_vjp(post, g)["input"]


def _act_rows(name, act, shape):
    return [] if act is None else [LayerSpec(f"{name}.{act}", act, shape, shape)]


@dataclass(frozen=True)
class Conv:
    name: str
    cin: int
    cout: int
    kernel: Tuple[int, int] = (3, 3)
    stride: int = 1
    groups: int = 1
    padding: str = "same"
    activation: Optional[str] = None
    kind: str = "conv"

    def param_shapes(self) -> Dict[str, Tuple[Shape, int]]:
        kh, kw = self.kernel
        fan_in = (self.cin // self.groups) * kh * kw
        return {f"{self.name}.weight": ((self.cout, self.cin // self.groups, kh, kw), fan_in),
                f"{self.name}.bias": ((self.cout,), 0)}

    def out_shape(self, in_shape: Shape) -> Shape:
        _, h, w = in_shape
        kh, kw = self.kernel
        if self.padding == "same":
            return (self.cout, -(-h // self.stride), -(-w // self.stride))
        return (self.cout, (h - kh) // self.stride + 1, (w - kw) // self.stride + 1)

    def layers(self, in_shape):
        out = self.out_shape(in_shape)
        rows = [LayerSpec(self.name, self.kind, in_shape, out, self.kernel, self.stride, self.groups)]
        return rows + _act_rows(self.name, self.activation, out), out

    def forward(self, p, x):
        pre = T.conv2d(x, p[f"{self.name}.weight"], p[f"{self.name}.bias"],
                       self.stride, self.groups, self.padding)
        post = _act_forward(self.activation, pre)
        return post, (x, pre, post)

    def backward(self, p, cache, g):
        x, pre, post = cache
        g = _act_backward(self.activation, pre, post, g)
        gr = T.conv2d_vjp(x, p[f"{self.name}.weight"], p[f"{self.name}.bias"],
                          self.stride, self.groups, self.padding, g)
        return gr["input"], {f"{self.name}.weight": gr["kernel"], f"{self.name}.bias": gr["bias"]}


@dataclass(frozen=True)
class Dense:
    name: str
    nin: int
    nout: int
    activation: Optional[str] = None
    kind: str = "fc"

    def param_shapes(self):
        return {f"{self.name}.weight": ((self.nout, self.nin), self.nin),
                f"{self.name}.bias": ((self.nout,), 0)}

    def out_shape(self, in_shape):
        return (self.nout,)

    def layers(self, in_shape):
        out = (self.nout,)
        rows = [LayerSpec(self.name, self.kind, (self.nin,), out)]
        return rows + _act_rows(self.name, self.activation, out), out

    def forward(self, p, x):
        pre = T.fully_connected(x, p[f"{self.name}.weight"], p[f"{self.name}.bias"])
        post = _act_forward(self.activation, pre)
        return post, (x, pre, post)

    def backward(self, p, cache, g):
        x, pre, post = cache
        g = _act_backward(self.activation, pre, post, g)
        gr = T.fully_connected_vjp(x, p[f"{self.name}.weight"], p[f"{self.name}.bias"], g)
        return gr["input"].reshape(np.shape(x)), {f"{self.name}.weight": gr["weight"],
                                                  f"{self.name}.bias": gr["bias"]}


@dataclass(frozen=True)
class Reshape:
    name: str
    shape: Shape

    def param_shapes(self):
        return {}

    def out_shape(self, in_shape):
        return self.shape

    def layers(self, in_shape):
        return [], self.shape

    def forward(self, p, x):
        return x.reshape(self.shape), x.shape

    def backward(self, p, cache, g):
        return g.reshape(cache), {}


@dataclass(frozen=True)
class Upsample:
    name: str
    factor: int

    def param_shapes(self):
        return {}

    def out_shape(self, in_shape):
        c, h, w = in_shape
        return (c, h * self.factor, w * self.factor)

    def layers(self, in_shape):
        out = self.out_shape(in_shape)
        return [LayerSpec(self.name, "upsample", in_shape, out)], out

    def forward(self, p, x):
        return T.upsample_nearest(x, self.factor), None

    def backward(self, p, cache, g):
        return T.upsample_nearest_vjp(self.factor, g)["input"], {}


@dataclass(frozen=True)
class Softmax:
    name: str

    def param_shapes(self):
        return {}

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def layers(self, in_shape):
        out = self.out_shape(in_shape)
        return [LayerSpec(self.name, "softmax", out, out)], out

    def forward(self, p, x):
        y = T.softmax(x.ravel())
        return y, (x.shape, y)

    def backward(self, p, cache, g):
        shape, y = cache
        return T.softmax_vjp(y, g)["input"].reshape(shape), {}


@dataclass(frozen=True)
class ShuffleSEModule:
    """PGconv -> shuffle -> depthwise -> Pconv -> squeeze-excitation, plus shortcut.

    A relu follows the first grouped pointwise conv and the residual sum;
    the shortcut is a 1x1 conv when ``shortcut_conv`` is set, identity
    otherwise.
    """

    name: str
    cin: int
    mid: int
    cout: int
    groups: int
    se_hidden: int
    shortcut_conv: bool = False

    def _parts(self):
        n, g = self.name, self.groups
        return dict(
            pg=Conv(f"{n}.pgconv", self.cin, self.mid, (1, 1), 1, g, "same", "relu", "pgconv"),
            dw=Conv(f"{n}.dwconv", self.mid, self.mid, (3, 3), 1, self.mid, "same", None, "dwconv"),
            pc=Conv(f"{n}.pconv", self.mid, self.cout, (1, 1), 1, g, "same", None, "pconv"),
            fc1=Dense(f"{n}.se_fc1", self.cout, self.se_hidden, "relu", "se-fc"),
            fc2=Dense(f"{n}.se_fc2", self.se_hidden, self.cout, "sigmoid", "se-fc"),
            sc=Conv(f"{n}.shortcut", self.cin, self.cout, (1, 1), 1, 1, "same", None,
                    "shortcut-conv") if self.shortcut_conv else None,
        )

    def param_shapes(self):
        out = {}
        for part in self._parts().values():
            if part is not None:
                out.update(part.param_shapes())
        return out

    def out_shape(self, in_shape):
        return (self.cout,) + tuple(in_shape[1:])

    def layers(self, in_shape):
        parts = self._parts()
        c, h, w = in_shape
        rows = []
        for key, shp in (("pg", in_shape), ("dw", (self.mid, h, w)), ("pc", (self.mid, h, w))):
            rows += parts[key].layers(shp)[0]
            if key == "pg":
                rows.append(LayerSpec(f"{self.name}.shuffle", "shuffle", (self.mid, h, w),
                                      (self.mid, h, w), groups=self.groups))
        out = (self.cout, h, w)
        rows.append(LayerSpec(f"{self.name}.gap", "gap", out, (self.cout, 1, 1)))
        rows += parts["fc1"].layers((self.cout,))[0]
        rows += parts["fc2"].layers((self.se_hidden,))[0]
        rows.append(LayerSpec(f"{self.name}.scale", "scale", out, out))
        if parts["sc"] is not None:
            rows += parts["sc"].layers(in_shape)[0]
        rows.append(LayerSpec(f"{self.name}.add", "residual-add", out, out))
        rows += _act_rows(self.name, "relu", out)
        return rows, out

    def forward(self, p, x):
        parts = self._parts()
        a, c_pg = parts["pg"].forward(p, x)
        a = T.channel_shuffle(a, self.groups)
        a, c_dw = parts["dw"].forward(p, a)
        u, c_pc = parts["pc"].forward(p, a)
        pooled = T.global_avg_pool(u).ravel()
        z, c_f1 = parts["fc1"].forward(p, pooled)
        sc, c_f2 = parts["fc2"].forward(p, z)
        v = T.scale_channels(u, sc)
        if parts["sc"] is not None:
            skip, c_sc = parts["sc"].forward(p, x)
        else:
            skip, c_sc = x, None
        s = T.residual_add(v, skip)
        return T.relu(s), (c_pg, c_dw, c_pc, c_f1, c_f2, c_sc, u, sc, s)

    def backward(self, p, cache, g):
        parts = self._parts()
        c_pg, c_dw, c_pc, c_f1, c_f2, c_sc, u, sc, s = cache
        grads = {}
        gs = T.relu_vjp(s, g)["input"]
        gadd = T.residual_add_vjp(gs)
        gsc_in = T.scale_channels_vjp(u, sc, gadd["a"])
        gz, gr = parts["fc2"].backward(p, c_f2, gsc_in["scales"])
        grads.update(gr)
        gpool, gr = parts["fc1"].backward(p, c_f1, gz)
        grads.update(gr)
        gu = gsc_in["input"] + T.global_avg_pool_vjp(u.shape, gpool.reshape(-1, 1, 1))["input"]
        ga, gr = parts["pc"].backward(p, c_pc, gu)
        grads.update(gr)
        ga, gr = parts["dw"].backward(p, c_dw, ga)
        grads.update(gr)
        ga = T.channel_shuffle_vjp(self.groups, ga)["input"]
        gx, gr = parts["pg"].backward(p, c_pg, ga)
        grads.update(gr)
        if parts["sc"] is not None:
            gskip, gr = parts["sc"].backward(p, c_sc, gadd["b"])
            grads.update(gr)
            gx = gx + gskip
        else:
            gx = gx + gadd["b"]
        return gx, grads


@dataclass(frozen=True)
class Architecture:
    input_shape: Shape
    blocks: Tuple[object, ...]

    def canonical(self) -> str:
        return repr(self)

    def fingerprint(self) -> int:
        digest = hashlib.blake2b(self.canonical().encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")

    def param_shapes(self) -> Dict[str, Tuple[Shape, int]]:
        out: Dict[str, Tuple[Shape, int]] = {}
        for block in self.blocks:
            out.update(block.param_shapes())
        return out

    def layers(self, input_shape: Optional[Shape] = None) -> List[LayerSpec]:
        shape = tuple(input_shape or self.input_shape)
        rows: List[LayerSpec] = []
        for block in self.blocks:
            r, shape = block.layers(shape)
            rows += r
        return rows


# ---------------------------------------------------------------------------
# declarative specs

@dataclass(frozen=True)
class ModuleSpec:
    """One Table-style row: a structural module repeated ``repeats`` times."""

    label: str
    mid_channels: int
    out_channels: int
    repeats: int
    shortcut_conv: bool = False


TABLE1_MODULES = (
    ModuleSpec("module-1", 32, 64, 8),
    ModuleSpec("module-2", 64, 128, 1, shortcut_conv=True),
    ModuleSpec("module-3", 64, 128, 3),
    ModuleSpec("module-4", 128, 256, 1, shortcut_conv=True),
    ModuleSpec("module-5", 128, 256, 3),
)


@dataclass(frozen=True)
class NetworkSpec:
    """Detector network description; the defaults reproduce the published table."""

    input_shape: Shape = (3, 64, 64)
    stem_channels: int = 64
    modules: Tuple[ModuleSpec, ...] = TABLE1_MODULES
    classes: int = 2
    groups: int = 4
    se_ratio: int = 4
    se_min: int = 4
    width: float = 1.0
    repeats: Optional[Tuple[int, ...]] = None

    @classmethod
    def desk(cls) -> "NetworkSpec":
        """Scaled variant used for laptop-scale training: repeats 1, width 1/8, 16x16 input."""
        return cls(input_shape=(3, 16, 16), width=0.125, repeats=(1,) * len(TABLE1_MODULES))

    def _w(self, c: int) -> int:
        return max(1, int(round(c * self.width)))

    def architecture(self) -> Architecture:
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise SpecError(f"input: geometry must be C x H x W, got {self.input_shape}")
        if self.classes < 2:
            raise SpecError(f"output layer: need at least 2 classes, got {self.classes}")
        if self.repeats is not None and len(self.repeats) != len(self.modules):
            raise SpecError(f"repeats override has {len(self.repeats)} entries for "
                            f"{len(self.modules)} modules")
        cin, h, w = self.input_shape
        stem = self._w(self.stem_channels)
        blocks: List[object] = [Conv("input", cin, stem, (3, 3), activation="relu")]
        c = stem
        for mi, mod in enumerate(self.modules):
            reps = mod.repeats if self.repeats is None else self.repeats[mi]
            mid, out = self._w(mod.mid_channels), self._w(mod.out_channels)
            if reps < 0:
                raise SpecError(f"{mod.label}: negative repeat count {reps}")
            for name, val in (("input channels", c), ("mid channels", mid),
                              ("out channels", out)):
                if val % self.groups:
                    raise SpecError(f"{mod.label}: {name} {val} not divisible by "
                                    f"groups {self.groups}")
            for k in range(reps):
                cin_k = c if k == 0 else out
                needs_conv = k == 0 and mod.shortcut_conv
                if k == 0 and not mod.shortcut_conv and c != out:
                    raise SpecError(f"{mod.label}: identity shortcut needs equal widths, "
                                    f"got {c} -> {out}")
                hidden = max(out // self.se_ratio, self.se_min)
                blocks.append(ShuffleSEModule(f"{mod.label}.{k}", cin_k, mid, out,
                                              self.groups, hidden, needs_conv))
            if reps:
                c = out
        blocks.append(Conv("output", c, self.classes, (h, w), padding="valid",
                           kind="output-conv"))
        blocks.append(Softmax("softmax"))
        return Architecture(tuple(self.input_shape), tuple(blocks))


@dataclass(frozen=True)
class GanSpec:
    """Reduced generator / discriminator pair built from upsample+conv stages."""

    noise_dim: int = 100
    image_shape: Shape = (3, 64, 64)
    base_channels: int = 32
    upsamples: int = 2
    hidden: int = 32

    def _check(self):
        c, h, w = self.image_shape
        f = 2 ** self.upsamples
        if self.noise_dim < 1 or c < 1:
            raise SpecError(f"invalid noise/channel geometry: {self}")
        if h % f or w % f or h < f or w < f:
            raise SpecError(f"image {h}x{w} not divisible by upsampling factor {f}")

    def generator(self) -> Architecture:
        self._check()
        c, h, w = self.image_shape
        f = 2 ** self.upsamples
        ch = self.base_channels
        blocks: List[object] = [Dense("g.fc", self.noise_dim, ch * (h // f) * (w // f), "relu"),
                                Reshape("g.reshape", (ch, h // f, w // f))]
        for i in range(self.upsamples):
            nxt = max(ch // 2, 4)
            blocks.append(Upsample(f"g.up{i}", 2))
            last = i == self.upsamples - 1
            blocks.append(Conv(f"g.conv{i}", ch, c if last else nxt, (3, 3),
                               activation="sigmoid" if last else "relu"))
            ch = nxt
        return Architecture((self.noise_dim,), tuple(blocks))

    def discriminator(self) -> Architecture:
        self._check()
        c, h, w = self.image_shape
        ch = self.base_channels // 2
        blocks: List[object] = [Conv("d.conv0", c, ch, (3, 3), stride=2, activation="relu"),
                                Conv("d.conv1", ch, ch, (3, 3), stride=2, activation="relu")]
        shape = tuple(self.image_shape)
        for block in blocks:
            shape = block.out_shape(shape)
        _, oh, ow = shape
        blocks += [Reshape("d.flatten", (ch * oh * ow,)),
                   Dense("d.fc0", ch * oh * ow, self.hidden, "relu"),
                   Dense("d.fc1", self.hidden, 1, "sigmoid")]
        return Architecture(tuple(self.image_shape), tuple(blocks))


# ---------------------------------------------------------------------------
# materialized network

@dataclass
class Tape:
    caches: list = field(default_factory=list)


class Network:
    """Architecture plus parameter store."""

    def __init__(self, arch: Architecture, params: Dict[str, np.ndarray],
                 seed: Optional[int] = None, spec=None):
        self.arch = arch
        self.params = params
        self.seed = seed
        self.spec = spec if spec is not None else arch

    @property
    def fingerprint(self) -> int:
        return self.arch.fingerprint()

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=T.DTYPE)
        for block in self.arch.blocks:
            x, _ = block.forward(self.params, x)
        return x

    __call__ = forward

    def forward_tape(self, x: np.ndarray):
        x = np.asarray(x, dtype=T.DTYPE)
        tape = Tape()
        for block in self.arch.blocks:
            x, cache = block.forward(self.params, x)
            tape.caches.append(cache)
        return x, tape

    def backward(self, tape: Tape, gout: np.ndarray):
        """Return ``(input_gradient, parameter_gradients)``."""
        grads: Dict[str, np.ndarray] = {}
        g = gout
        for block, cache in zip(reversed(self.arch.blocks), reversed(tape.caches)):
            g, gr = block.backward(self.params, cache, g)
            grads.update(gr)
        return g, grads

    def copy(self) -> "Network":
        return Network(self.arch, {k: v.copy() for k, v in self.params.items()},
                       self.seed, self.spec)

    def layers(self) -> List[LayerSpec]:
        return self.arch.layers()


def init_params(arch: Architecture, seed: int) -> Dict[str, np.ndarray]:
    """He fan-in normal weights drawn in declaration order; zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, (shape, fan_in) in arch.param_shapes().items():
        if fan_in:
            params[name] = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        else:
            params[name] = np.zeros(shape)
    return params


def build_network(arch: Architecture, seed: int, spec=None) -> Network:
    return Network(arch, init_params(arch, seed), seed, spec)


def build_wldetectnet(spec: NetworkSpec = NetworkSpec(), seed: int = 0) -> Network:
    return build_network(spec.architecture(), seed, spec)


def build_wlgeneratenet(spec: GanSpec = GanSpec(), seed: int = 0):
    """Return ``(generator, discriminator)``; the two draw from distinct streams."""
    g_seed, d_seed = np.random.SeedSequence(seed).generate_state(2, dtype=np.uint64)
    return (build_network(spec.generator(), int(g_seed), spec),
            build_network(spec.discriminator(), int(d_seed), spec))


# ---------------------------------------------------------------------------
# accounting

def _rows(obj) -> List[LayerSpec]:
    if isinstance(obj, Network):
        return obj.layers()
    if isinstance(obj, Architecture):
        return obj.layers()
    if isinstance(obj, NetworkSpec):
        return obj.architecture().layers()
    return list(obj)


def count_params(network) -> int:
    """Scalar parameter count, biases included."""
    return sum(row.params for row in _rows(network))


@dataclass(frozen=True)
class FlopReport:
    rows: Tuple[LayerSpec, ...]

    CATEGORY = {"fc": "fc", "se-fc": "se", "gap": "se", "scale": "se",
                "relu": "activation", "sigmoid": "activation", "softmax": "activation",
                "residual-add": "elementwise", "shuffle": "elementwise",
                "upsample": "elementwise"}

    @classmethod
    def category(cls, kind: str) -> str:
        return "conv" if kind in CONV_KINDS else cls.CATEGORY.get(kind, "other")

    def macs_by_category(self) -> Dict[str, int]:
        out: Dict[str, int] = {}
        for row in self.rows:
            cat = self.category(row.kind)
            out[cat] = out.get(cat, 0) + row.macs + row.elementwise_ops
        return out

    @property
    def conv_macs(self) -> int:
        return sum(r.macs for r in self.rows if r.kind in CONV_KINDS)

    @property
    def se_macs(self) -> int:
        return sum(r.macs for r in self.rows if self.category(r.kind) == "se")

    @property
    def fc_macs(self) -> int:
        return sum(r.macs for r in self.rows if r.kind == "fc")

    @property
    def activation_ops(self) -> int:
        return sum(r.elementwise_ops for r in self.rows)

    @property
    def total_macs(self) -> int:
        """Multiply-accumulates of conv, dense and SE layers."""
        return self.conv_macs + self.fc_macs + self.se_macs

    @property
    def total_flops(self) -> int:
        return 2 * self.total_macs


def count_flops(network, input_shape: Optional[Shape] = None) -> FlopReport:
    if isinstance(network, (Network, Architecture, NetworkSpec)):
        arch = network.arch if isinstance(network, Network) else (
            network.architecture() if isinstance(network, NetworkSpec) else network)
        if input_shape is not None and tuple(input_shape) != arch.input_shape:
            # the output conv spans the full input extent, so rebuild for new geometry
            if isinstance(network, Network) and isinstance(network.spec, NetworkSpec):
                arch = replace(network.spec, input_shape=tuple(input_shape)).architecture()
            elif isinstance(network, NetworkSpec):
                arch = replace(network, input_shape=tuple(input_shape)).architecture()
            else:
                return FlopReport(tuple(arch.layers(tuple(input_shape))))
        return FlopReport(tuple(arch.layers()))
    return FlopReport(tuple(_rows(network)))


DEFAULT_CONV_KINDS = frozenset({"conv", "pgconv", "dwconv", "pconv", "shortcut-conv",
                                "output-conv"})


def count_conv_layers(network, include_fc: bool = False, include_shortcut: bool = True,
                      include_output: bool = True) -> int:
    kinds = set(DEFAULT_CONV_KINDS)
    if not include_shortcut:
        kinds.discard("shortcut-conv")
    if not include_output:
        kinds.discard("output-conv")
    if include_fc:
        kinds |= FC_KINDS
    return sum(1 for row in _rows(network) if row.kind in kinds)


def conv_toy(cin: int = 3, cout: int = 64, k: int = 3, hw: Sequence[int] = (64, 64)) -> Architecture:
    """Single-convolution architecture, handy for checking the counters."""
    return Architecture((cin,) + tuple(hw), (Conv("conv", cin, cout, (k, k)),))
