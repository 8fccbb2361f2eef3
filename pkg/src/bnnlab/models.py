"""Layer-stack models, deterministic or Bayesian, plus checkpoint I/O.

A ModelSpec is a declarative layer list; build_model turns it into a Model
whose weight-bearing layers hold either plain Tensors or VariationalParams.
Forward passes return (logits, kl_total) so the training loss can weight the
KL term; deterministic stacks report a KL of exactly zero.
"""
from __future__ import annotations

import json
import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .rng import RandomStream, derive_seed
from .tensor import Tensor
from .variational import PriorSpec, VariationalParam, kl_gaussian, rho_for_sigma, sample_weights

_LAYER_KINDS = ("conv", "norm", "relu", "pool", "dense_block", "linear")
_WEIGHTED_KINDS = ("conv", "norm", "linear", "dense_block")

_MAGIC = b"BNNL"
_VERSION = 1


class CheckpointError(RuntimeError):
    """Checkpoint file unreadable, corrupt, or from an unknown version."""


@dataclass(frozen=True)
class SamplingMode:
    """MeanOnly (seed None) or Sample(seed) for Bayesian weight draws."""

    seed: int | None = None

    @classmethod
    def mean_only(cls) -> "SamplingMode":
        return cls(None)

    @classmethod
    def sample(cls, seed: int) -> "SamplingMode":
        return cls(int(seed))

    @property
    def is_sample(self) -> bool:
        return self.seed is not None


MEAN_ONLY = SamplingMode.mean_only()


@dataclass(frozen=True)
class LayerSpec:
    """One layer in a stack.

    width: conv out-channels or linear out-features.  pool=None on a pool
    layer means global average over the spatial grid.  The bayesian flag is
    only meaningful on weight-bearing kinds; a dense block forwards it to the
    conv/norm layers it contains.
    """

    kind: str
    width: int | None = None
    kernel: int | None = None
    pad: int | None = None
    pool: int | None = None
    depth: int | None = None
    growth: int | None = None
    bayesian: bool = False

    def __post_init__(self):
        if self.kind not in _LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}; expected one of {_LAYER_KINDS}")
        if self.bayesian and self.kind not in _WEIGHTED_KINDS:
            raise ValueError(f"bayesian flag is not valid on {self.kind!r} layers")
        if self.kind == "conv" and (self.width is None or self.kernel is None):
            raise ValueError("conv layer needs width and kernel")
        if self.kind == "linear" and self.width is None:
            raise ValueError("linear layer needs width")
        if self.kind == "dense_block" and (self.depth is None or self.growth is None):
            raise ValueError("dense_block layer needs depth and growth")

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "bayesian": self.bayesian}
        for f in ("width", "kernel", "pad", "pool", "depth", "growth"):
            v = getattr(self, f)
            if v is not None:
                d[f] = v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]  # (C, H, W)
    class_count: int
    prior_sigma: float = 0.15
    init_sigma: float = 0.15

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        if self.class_count < 2:
            raise ValueError(f"need at least 2 classes, got {self.class_count}")
        if not self.prior_sigma > 0 or not self.init_sigma > 0:
            raise ValueError("prior_sigma and init_sigma must be positive")

    def to_dict(self) -> dict:
        return {
            "layers": [l.to_dict() for l in self.layers],
            "input_shape": list(self.input_shape),
            "class_count": self.class_count,
            "prior_sigma": self.prior_sigma,
            "init_sigma": self.init_sigma,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            layers=tuple(LayerSpec.from_dict(l) for l in d["layers"]),
            input_shape=tuple(d["input_shape"]),
            class_count=d["class_count"],
            prior_sigma=d["prior_sigma"],
            init_sigma=d["init_sigma"],
        )


@dataclass
class _Ctx:
    """Per-forward state: sampling mode, train flag, and the KL ledger."""

    mode: SamplingMode
    train: bool
    prior: PriorSpec
    kl: list = field(default_factory=list)


class _Weights:
    """One named weight tensor, deterministic or variational."""

    def __init__(self, name: str, value: np.ndarray, bayesian: bool, init_sigma: float):
        self.name = name
        if bayesian:
            rho = np.full_like(value, rho_for_sigma(init_sigma))
            self.vp = VariationalParam(Tensor(value, name=f"{name}.mu"), Tensor(rho, name=f"{name}.rho"))
            self.plain = None
        else:
            self.vp = None
            self.plain = Tensor(value, requires_grad=True, name=name)

    def tensors(self) -> list[tuple[str, Tensor]]:
        if self.vp is not None:
            return [(f"{self.name}.mu", self.vp.mu), (f"{self.name}.rho", self.vp.rho)]
        return [(self.name, self.plain)]

    def realize(self, ctx: _Ctx) -> Tensor:
        if self.vp is None:
            return self.plain
        ctx.kl.append(kl_gaussian(self.vp, ctx.prior))
        if not ctx.mode.is_sample:
            return self.vp.mu
        stream = RandomStream(derive_seed(ctx.mode.seed, self.name))
        return sample_weights(self.vp, stream.normal(self.vp.shape))


class _Conv:
    def __init__(self, name, in_ch, out_ch, kernel, pad, bayesian, spec: ModelSpec, init_stream):
        self.pad = pad
        fan_in = in_ch * kernel * kernel
        w0 = init_stream(f"{name}.w").normal((out_ch, in_ch, kernel, kernel), std=np.sqrt(2.0 / fan_in))
        self.w = _Weights(f"{name}.w", w0, bayesian, spec.init_sigma)
        self.b = _Weights(f"{name}.b", np.zeros(out_ch), bayesian, spec.init_sigma)
        self.out_ch = out_ch

    def forward(self, x: Tensor, ctx: _Ctx) -> Tensor:
        w = self.w.realize(ctx)
        b = T.reshape(self.b.realize(ctx), (1, self.out_ch, 1, 1))
        return T.conv2d(x, w, pad=self.pad) + b

    def weights(self):
        return [self.w, self.b]


class _Norm:
    """Channelwise normalization: batch statistics while training, stored
    running statistics at evaluation, then a learned affine."""

    MOMENTUM = 0.1
    EPS = 1e-5

    def __init__(self, name, ch, bayesian, spec: ModelSpec):
        self.name = name
        self.gamma = _Weights(f"{name}.gamma", np.ones(ch), bayesian, spec.init_sigma)
        self.beta = _Weights(f"{name}.beta", np.zeros(ch), bayesian, spec.init_sigma)
        self.running_mean = np.zeros(ch)
        self.running_var = np.ones(ch)
        self.ch = ch

    def forward(self, x: Tensor, ctx: _Ctx) -> Tensor:
        if ctx.train:
            m = T.tensor_mean(x, axis=(0, 2, 3), keepdims=True)
            d = x - m
            v = T.tensor_mean(T.mul(d, d), axis=(0, 2, 3), keepdims=True)
            mo = self.MOMENTUM
            self.running_mean = (1 - mo) * self.running_mean + mo * m.data.reshape(-1)
            self.running_var = (1 - mo) * self.running_var + mo * v.data.reshape(-1)
        else:
            m = Tensor(self.running_mean.reshape(1, self.ch, 1, 1))
            v = Tensor(self.running_var.reshape(1, self.ch, 1, 1))
            d = x - m
        xhat = d / T.sqrt(v + self.EPS)
        g = T.reshape(self.gamma.realize(ctx), (1, self.ch, 1, 1))
        b = T.reshape(self.beta.realize(ctx), (1, self.ch, 1, 1))
        return T.mul(xhat, g) + b

    def weights(self):
        return [self.gamma, self.beta]


class _Relu:
    def forward(self, x, ctx):
        return T.relu(x)

    def weights(self):
        return []


class _Pool:
    def __init__(self, size: int | None):
        self.size = size

    def forward(self, x, ctx):
        if self.size is None:
            return T.tensor_mean(x, axis=(2, 3))
        return T.mean_pool(x, self.size)

    def weights(self):
        return []


class _Linear:
    def __init__(self, name, in_features, out_features, bayesian, spec: ModelSpec, init_stream):
        w0 = init_stream(f"{name}.w").normal((in_features, out_features), std=np.sqrt(2.0 / in_features))
        self.w = _Weights(f"{name}.w", w0, bayesian, spec.init_sigma)
        self.b = _Weights(f"{name}.b", np.zeros(out_features), bayesian, spec.init_sigma)

    def forward(self, x: Tensor, ctx: _Ctx) -> Tensor:
        if x.ndim != 2:
            x = T.reshape(x, (x.shape[0], -1))
        return T.matmul(x, self.w.realize(ctx)) + self.b.realize(ctx)

    def weights(self):
        return [self.w, self.b]


class _DenseBlock:
    """Densely connected block: each step sees the channel-concat of the
    block input and every earlier step's output."""

    def __init__(self, name, in_ch, depth, growth, kernel, bayesian, spec, init_stream):
        self.steps = []
        ch = in_ch
        for i in range(depth):
            norm = _Norm(f"{name}.s{i}.norm", ch, bayesian, spec)
            conv = _Conv(f"{name}.s{i}.conv", ch, growth, kernel, kernel // 2, bayesian, spec, init_stream)
            self.steps.append((norm, conv))
            ch += growth
        self.out_ch = ch

    def forward(self, x: Tensor, ctx: _Ctx) -> Tensor:
        feats = x
        for norm, conv in self.steps:
            h = conv.forward(T.relu(norm.forward(feats, ctx)), ctx)
            feats = T.concat([feats, h], axis=1)
        return feats

    def weights(self):
        out = []
        for norm, conv in self.steps:
            out.extend(norm.weights())
            out.extend(conv.weights())
        return out


class Model:
    def __init__(self, spec: ModelSpec, layers: list):
        self.spec = spec
        self.layers = layers
        self.prior = PriorSpec(spec.prior_sigma)
        self._freeze_lock = threading.Lock()
        self._freeze_depth = 0

    def forward(self, batch, mode: SamplingMode = MEAN_ONLY, train: bool = False):
        """Run the stack; returns (logits, kl_total) with kl_total a scalar
        Tensor (exactly 0 for a fully deterministic model)."""
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        if x.ndim != 4 or tuple(x.shape[1:]) != self.spec.input_shape:
            raise T.ShapeError(
                f"expected batch of shape [N, {', '.join(map(str, self.spec.input_shape))}], got {x.shape}"
            )
        ctx = _Ctx(mode=mode, train=train, prior=self.prior)
        for layer in self.layers:
            x = layer.forward(x, ctx)
        kl = ctx.kl[0] if ctx.kl else Tensor(0.0)
        for term in ctx.kl[1:]:
            kl = kl + term
        return x, kl

    # -- parameter plumbing ------------------------------------------------

    def _weightobjs(self):
        for layer in self.layers:
            yield from layer.weights()

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for wobj in self._weightobjs():
            out.extend(wobj.tensors())
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def _buffer_sites(self):
        """Yield (name, owner, attr) for each running-statistics buffer."""
        for layer in self.layers:
            norms = []
            if isinstance(layer, _Norm):
                norms.append(layer)
            elif isinstance(layer, _DenseBlock):
                norms.extend(norm for norm, _ in layer.steps)
            for norm in norms:
                yield f"{norm.name}.running_mean", norm, "running_mean"
                yield f"{norm.name}.running_var", norm, "running_var"

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        return [(name, getattr(owner, attr)) for name, owner, attr in self._buffer_sites()]

    def parameter_count(self) -> int:
        return sum(t.size for t in self.parameters())

    @property
    def bayesian(self) -> bool:
        return any(w.vp is not None for w in self._weightobjs())


@contextmanager
def frozen_params(model: Model):
    """Temporarily drop requires_grad on all parameters.

    Input-gradient work (attacks) only needs d loss / d x; freezing the
    weights keeps backward from computing parameter gradients and keeps the
    KL bookkeeping off the graph.  Reentrant and thread-safe via a depth
    counter, since parallel attack jobs share one model read-only.
    """
    with model._freeze_lock:
        model._freeze_depth += 1
        if model._freeze_depth == 1:
            for t in model.parameters():
                t.requires_grad = False
    try:
        yield
    finally:
        with model._freeze_lock:
            model._freeze_depth -= 1
            if model._freeze_depth == 0:
                for t in model.parameters():
                    t.requires_grad = True


def build_model(spec: ModelSpec, seed: int = 0) -> Model:
    """Construct and initialize a model; weight init is a pure function of
    (spec, seed) regardless of construction order."""

    def init_stream(name):
        return RandomStream(derive_seed(seed, "init", name))

    layers = []
    shape = spec.input_shape  # (C,H,W) or (F,) after flattening layers
    for idx, ls in enumerate(spec.layers):
        name = f"L{idx}"
        try:
            layer, shape = _build_layer(name, ls, shape, spec, init_stream)
        except (ValueError, T.ShapeError) as e:
            raise T.ShapeError(f"layer {idx} ({ls.kind}): {e}") from e
        layers.append(layer)
    if len(shape) != 1 or shape[0] != spec.class_count:
        raise T.ShapeError(
            f"stack produces shape {shape}, expected ({spec.class_count},) logits"
        )
    return Model(spec, layers)


def _build_layer(name, ls: LayerSpec, shape, spec, init_stream):
    if ls.kind in ("conv", "norm", "pool", "dense_block") and len(shape) != 3:
        raise ValueError(f"needs a [C,H,W] input, has {shape}")
    if ls.kind == "conv":
        c, h, w = shape
        pad = ls.pad if ls.pad is not None else ls.kernel // 2
        ho, wo = h + 2 * pad - ls.kernel + 1, w + 2 * pad - ls.kernel + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"kernel {ls.kernel} with pad {pad} collapses {h}x{w} input")
        return _Conv(name, c, ls.width, ls.kernel, pad, ls.bayesian, spec, init_stream), (ls.width, ho, wo)
    if ls.kind == "norm":
        return _Norm(name, shape[0], ls.bayesian, spec), shape
    if ls.kind == "relu":
        return _Relu(), shape
    if ls.kind == "pool":
        if ls.pool is None:
            return _Pool(None), (shape[0],)
        c, h, w = shape
        if h % ls.pool or w % ls.pool:
            raise ValueError(f"pool window {ls.pool} does not tile {h}x{w}")
        return _Pool(ls.pool), (c, h // ls.pool, w // ls.pool)
    if ls.kind == "dense_block":
        kernel = ls.kernel if ls.kernel is not None else 3
        block = _DenseBlock(name, shape[0], ls.depth, ls.growth, kernel, ls.bayesian, spec, init_stream)
        return block, (block.out_ch, shape[1], shape[2])
    if ls.kind == "linear":
        in_features = int(np.prod(shape))
        return _Linear(name, in_features, ls.width, ls.bayesian, spec, init_stream), (ls.width,)
    raise ValueError(f"unhandled kind {ls.kind}")


def predict_ensemble(model: Model, batch, n_samples: int, seed: int) -> np.ndarray:
    """Mean softmax probabilities over n posterior draws.

    A deterministic model ignores n_samples and seed entirely, so its output
    equals softmax(forward) exactly.
    """
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    with T.no_grad():
        if not model.bayesian:
            logits, _ = model.forward(batch, MEAN_ONLY)
            return T.softmax(logits, axis=1).data
        acc = None
        for k in range(n_samples):
            logits, _ = model.forward(batch, SamplingMode.sample(derive_seed(seed, "ens", k)))
            p = T.softmax(logits, axis=1).data
            acc = p if acc is None else acc + p
        return acc / n_samples


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, canonical JSON header, raw float64 blobs


def save_checkpoint(model: Model, path, meta: dict | None = None) -> None:
    """Write model spec, all parameters, and buffers; bit-exact round trip."""
    named = model.named_parameters()
    buffers = model.named_buffers()
    header = {
        "spec": model.spec.to_dict(),
        "meta": meta or {},
        "params": [{"name": n, "shape": list(t.shape)} for n, t in named],
        "buffers": [{"name": n, "shape": list(b.shape)} for n, b in buffers],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(blob)))
        f.write(blob)
        for _, t in named:
            f.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        for _, b in buffers:
            f.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[Model, dict]:
    """Rebuild a model from a checkpoint; returns (model, meta)."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < 12 or raw[:4] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if len(raw) < 12 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12 : 12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from e

    model = build_model(ModelSpec.from_dict(header["spec"]), seed=0)
    off = 12 + hlen
    params = dict(model.named_parameters())
    expected = [(p["name"], tuple(p["shape"])) for p in header["params"]]
    have = [(n, t.shape) for n, t in model.named_parameters()]
    if expected != have:
        raise CheckpointError(f"{path}: parameter table does not match spec")
    for pname, pshape in expected:
        count = int(np.prod(pshape)) if pshape else 1
        end = off + 8 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated at tensor {pname!r} (offset {off})")
        params[pname].data = np.frombuffer(raw[off:end], dtype="<f8").reshape(pshape).copy()
        off = end
    sites = {name: (owner, attr) for name, owner, attr in model._buffer_sites()}
    for binfo in header["buffers"]:
        bshape = tuple(binfo["shape"])
        count = int(np.prod(bshape)) if bshape else 1
        end = off + 8 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated at buffer {binfo['name']!r} (offset {off})")
        if binfo["name"] not in sites:
            raise CheckpointError(f"{path}: buffer {binfo['name']!r} not present in spec")
        owner, attr = sites[binfo["name"]]
        setattr(owner, attr, np.frombuffer(raw[off:end], dtype="<f8").reshape(bshape).copy())
        off = end
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return model, header["meta"]


# ---------------------------------------------------------------------------
# toy roster: desk-scale stand-ins for the reference architectures


def plain_cnn_spec(
    input_shape=(1, 8, 8), classes=3, bayesian=False, widths=(8, 16), prior_sigma=0.15
) -> ModelSpec:
    """Small conv-relu stack with stage pooling; VGG-flavored."""
    layers = []
    for w in widths:
        layers.append(LayerSpec("conv", width=w, kernel=3, bayesian=bayesian))
        layers.append(LayerSpec("relu"))
        layers.append(LayerSpec("pool", pool=2))
    layers.append(LayerSpec("pool"))  # global average
    layers.append(LayerSpec("linear", width=classes, bayesian=bayesian))
    return ModelSpec(tuple(layers), input_shape, classes, prior_sigma=prior_sigma)


def mini_dense_spec(
    input_shape=(1, 8, 8),
    classes=3,
    bayesian=False,
    stem=8,
    growth=12,
    depth=4,
    prior_sigma=0.15,
) -> ModelSpec:
    """Two densely connected blocks with a 1x1-conv + pool transition.

    The stem pools immediately so the blocks run on a small grid; at desk
    scale the dense connectivity, not spatial extent, is the point.
    """
    layers = [LayerSpec("conv", width=stem, kernel=3, bayesian=bayesian)]
    layers.append(LayerSpec("pool", pool=2))
    ch = stem
    layers.append(LayerSpec("dense_block", depth=depth, growth=growth, bayesian=bayesian))
    ch += depth * growth
    layers.append(LayerSpec("conv", width=ch // 2, kernel=1, bayesian=bayesian))
    layers.append(LayerSpec("pool", pool=2))
    layers.append(LayerSpec("dense_block", depth=depth, growth=growth, bayesian=bayesian))
    layers.append(LayerSpec("norm", bayesian=bayesian))
    layers.append(LayerSpec("relu"))
    layers.append(LayerSpec("pool"))
    layers.append(LayerSpec("linear", width=classes, bayesian=bayesian))
    return ModelSpec(tuple(layers), input_shape, classes, prior_sigma=prior_sigma)


_ARCHS = {"plain_cnn": plain_cnn_spec, "mini_dense": mini_dense_spec}


def arch_spec(arch: str, input_shape, classes, bayesian: bool) -> ModelSpec:
    if arch not in _ARCHS:
        raise ValueError(f"unknown arch {arch!r}; known: {sorted(_ARCHS)}")
    return _ARCHS[arch](input_shape=input_shape, classes=classes, bayesian=bayesian)
