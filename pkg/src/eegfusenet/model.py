"""Encoder-decoder generator, GRU cells and discriminator.

The encoder is an EEGNet-style stack of four convolutions: a temporal
filter bank whose kernel spans half the segment, a depthwise spatial filter
over all channels, and a depthwise-separable temporal convolution (depthwise
plus pointwise).  Recurrent variants read the pooled feature map as a
sequence and fuse it with a bidirectional GRU; the decoder mirrors the stack
with a seeded GRU and four transposed convolutions.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import (
    BatchNormState,
    Tensor,
    activation,
    affine,
    avg_pool2d,
    batchnorm2d,
    concat,
    conv2d,
    conv2d_transpose,
    glorot_init,
    load_tensors,
    no_grad,
    save_tensors,
    stack,
)
from .errors import ConfigurationError, DimensionError, ContractError

VARIANTS = ("cnn", "cnn_gan", "cnn_rnn", "cnn_rnn_gan")


def normalize_variant(name: str) -> str:
    v = name.replace("-", "_").lower()
    if v not in VARIANTS:
        raise ConfigurationError(f"unknown variant {name!r}; expected one of {', '.join(VARIANTS)}")
    return v


@dataclass
class GeneratorSpec:
    variant: str = "cnn_rnn_gan"
    channels: int = 32
    timepoints: int = 384
    f1: int = 16
    depth: int = 2
    gru_hidden: int = 32
    latent: int = 64
    pool1: int = 4
    pool2: int = 8
    sep_kernel: int | None = None

    def __post_init__(self):
        self.variant = normalize_variant(self.variant)
        if self.sep_kernel is None:
            # 16 taps at 384 samples, scaled with the input length
            self.sep_kernel = max(1, int(round(self.timepoints / 24)))

    @property
    def recurrent(self) -> bool:
        return "rnn" in self.variant

    @property
    def adversarial(self) -> bool:
        return self.variant.endswith("gan")

    @property
    def f2(self) -> int:
        return self.f1 * self.depth

    @property
    def temporal_kernel(self) -> int:
        return self.timepoints // 2

    @property
    def steps(self) -> int:
        return self.timepoints // (self.pool1 * self.pool2)

    def validate(self) -> None:
        for name in ("channels", "timepoints", "f1", "depth", "latent", "pool1", "pool2", "sep_kernel"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.timepoints % 2:
            raise ConfigurationError(f"temporal conv stage: T={self.timepoints} must be even (kernel = T/2)")
        if self.timepoints % self.pool1:
            raise ConfigurationError(f"first pooling stage: T={self.timepoints} not divisible by pool {self.pool1}")
        if (self.timepoints // self.pool1) % self.pool2:
            raise ConfigurationError(
                f"second pooling stage: length {self.timepoints // self.pool1} not divisible by pool {self.pool2}"
            )
        if self.recurrent:
            if self.gru_hidden < 1:
                raise ConfigurationError("gru_hidden must be positive")
            if self.latent != 2 * self.gru_hidden:
                raise ConfigurationError(
                    f"recurrent stage: latent={self.latent} must equal 2*gru_hidden={2 * self.gru_hidden}"
                )


# -- GRU ---------------------------------------------------------------------------


@dataclass
class GruCellParams:
    """Weights of one GRU cell; ``W*`` are [input, hidden], ``U*`` [hidden, hidden]."""

    W_z: Tensor
    W_r: Tensor
    W_h: Tensor
    U_z: Tensor
    U_r: Tensor
    U_h: Tensor
    b_z: Tensor
    b_r: Tensor
    b_h: Tensor

    @property
    def input_size(self) -> int:
        return self.W_z.shape[0]

    @property
    def hidden_size(self) -> int:
        return self.U_z.shape[0]

    @classmethod
    def init(cls, input_size: int, hidden: int, rng: np.random.Generator, dtype=np.float64) -> "GruCellParams":
        def w(shape):
            return glorot_init(shape, rng=rng, dtype=dtype)

        def b():
            return Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)

        return cls(
            w((input_size, hidden)), w((input_size, hidden)), w((input_size, hidden)),
            w((hidden, hidden)), w((hidden, hidden)), w((hidden, hidden)),
            b(), b(), b(),
        )

    @classmethod
    def zeros(cls, input_size: int, hidden: int, dtype=np.float64) -> "GruCellParams":
        def z(*shape):
            return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

        return cls(
            z(input_size, hidden), z(input_size, hidden), z(input_size, hidden),
            z(hidden, hidden), z(hidden, hidden), z(hidden, hidden),
            z(hidden), z(hidden), z(hidden),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}": v for k, v in self.__dict__.items()}


def gru_cell(x_t, h_prev, params: GruCellParams) -> Tensor:
    """One GRU step on a vector ``[F]`` or a batch ``[N, F]``."""
    x_t, h_prev = Tensor.lift(x_t), Tensor.lift(h_prev)
    vector = x_t.ndim == 1
    if vector:
        x_t = x_t.reshape(1, -1)
        h_prev = h_prev.reshape(1, -1)
    if x_t.shape[-1] != params.input_size:
        raise DimensionError(f"gru_cell: input extent {x_t.shape[-1]} != {params.input_size}")
    if h_prev.shape[-1] != params.hidden_size or h_prev.shape[0] != x_t.shape[0]:
        raise DimensionError(f"gru_cell: hidden shape {h_prev.shape} incompatible with {params.hidden_size}")
    p = params
    z = (x_t @ p.W_z + h_prev @ p.U_z + p.b_z).sigmoid()
    r = (x_t @ p.W_r + h_prev @ p.U_r + p.b_r).sigmoid()
    h_cand = (x_t @ p.W_h + (r * h_prev) @ p.U_h + p.b_h).tanh()
    h = (1.0 - z) * h_prev + z * h_cand
    return h.reshape(-1) if vector else h


def _zeros_like_hidden(x: Tensor, hidden: int) -> Tensor:
    shape = (hidden,) if x.ndim == 1 else (x.shape[0], hidden)
    return Tensor(np.zeros(shape, dtype=x.dtype))


def bigru(sequence: Sequence, fwd: GruCellParams, bwd: GruCellParams) -> list[Tensor]:
    """Per-step outputs ``a_t = h_t^f ⊕ h_t^b`` of a bidirectional GRU."""
    seq = [Tensor.lift(x) for x in sequence]
    if not seq:
        raise ContractError("bigru: empty sequence")
    shape = seq[0].shape
    if any(x.shape != shape for x in seq):
        raise DimensionError("bigru: sequence elements differ in extent")
    h = _zeros_like_hidden(seq[0], fwd.hidden_size)
    forward = []
    for x in seq:
        h = gru_cell(x, h, fwd)
        forward.append(h)
    h = _zeros_like_hidden(seq[0], bwd.hidden_size)
    backward = [None] * len(seq)
    for t in range(len(seq) - 1, -1, -1):
        h = gru_cell(seq[t], h, bwd)
        backward[t] = h
    return [concat([f, b], axis=-1) for f, b in zip(forward, backward)]


# -- modules -------------------------------------------------------------------


class Module:
    """Named parameters plus batch-norm running statistics."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.bn: dict[str, BatchNormState] = {}
        self.training = True

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def train(self) -> "Module":
        self.training = True
        return self

    def eval(self) -> "Module":
        self.training = False
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: v.data.copy() for k, v in self.params.items()}
        for k, s in self.bn.items():
            out[f"{k}.running_mean"] = s.running_mean.copy()
            out[f"{k}.running_var"] = s.running_var.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            if k not in state:
                raise ContractError(f"state missing parameter {k}")
            if state[k].shape != v.shape:
                raise DimensionError(f"parameter {k}: stored shape {state[k].shape} != {v.shape}")
            v.data = np.array(state[k], dtype=v.dtype)
        for k, s in self.bn.items():
            s.running_mean = np.array(state[f"{k}.running_mean"], dtype=s.running_mean.dtype)
            s.running_var = np.array(state[f"{k}.running_var"], dtype=s.running_var.dtype)

    def astype(self, dtype) -> "Module":
        for p in self.params.values():
            p.data = p.data.astype(dtype)
        for s in self.bn.values():
            s.running_mean = s.running_mean.astype(dtype)
            s.running_var = s.running_var.astype(dtype)
        return self

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    # helpers for subclasses
    def _kernel(self, name, shape, rng, groups=1):
        self.params[name] = glorot_init(shape, rng=rng, groups=groups)

    def _batchnorm(self, name, channels):
        self.params[f"{name}.gamma"] = Tensor(np.ones(channels), requires_grad=True)
        self.params[f"{name}.beta"] = Tensor(np.zeros(channels), requires_grad=True)
        self.bn[name] = BatchNormState.fresh(channels)

    def _bn(self, x, name):
        return batchnorm2d(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"], self.bn[name], self.training)

    def _gru(self, prefix, input_size, hidden, rng) -> GruCellParams:
        cell = GruCellParams.init(input_size, hidden, rng)
        self.params.update(cell.named(prefix))
        return cell

    def _cell(self, prefix) -> GruCellParams:
        names = GruCellParams.__dataclass_fields__
        return GruCellParams(**{k: self.params[f"{prefix}.{k}"] for k in names})


def _same_temporal(x: Tensor, kernel: Tensor, groups: int = 1) -> Tensor:
    """Stride-1 temporal conv whose output keeps the input length."""
    k = kernel.shape[3]
    width = x.shape[3]
    y = conv2d(x, kernel, stride=1, padding=(0, k // 2), groups=groups)
    if y.shape[3] != width:
        y = y[:, :, :, :width]
    return y


def _as_batch(X, spec: GeneratorSpec) -> Tensor:
    X = Tensor.lift(X)
    c, t = spec.channels, spec.timepoints
    if X.ndim == 2:
        X = X.reshape(1, 1, *X.shape)
    elif X.ndim == 3:
        X = X.reshape(X.shape[0], 1, X.shape[1], X.shape[2])
    if X.ndim != 4 or X.shape[1:] != (1, c, t):
        raise DimensionError(f"expected segments of shape ({c}, {t}), got {X.shape}")
    return X


class Encoder(Module):
    """Shared convolutional front end used by the generator and discriminator."""

    def _build_conv_stack(self, spec: GeneratorSpec, rng, prefix: str):
        f1, f2 = spec.f1, spec.f2
        self._kernel(f"{prefix}.temporal", (f1, 1, 1, spec.temporal_kernel), rng)
        self._batchnorm(f"{prefix}.bn1", f1)
        self._kernel(f"{prefix}.spatial", (f2, 1, spec.channels, 1), rng, groups=f1)
        self._batchnorm(f"{prefix}.bn2", f2)
        self._kernel(f"{prefix}.sep_depth", (f2, 1, 1, spec.sep_kernel), rng, groups=f2)
        self._kernel(f"{prefix}.sep_point", (f2, f2, 1, 1), rng)
        self._batchnorm(f"{prefix}.bn3", f2)

    def _conv_stack(self, x: Tensor, spec: GeneratorSpec, prefix: str) -> Tensor:
        p = self.params
        x = _same_temporal(x, p[f"{prefix}.temporal"])
        x = self._bn(x, f"{prefix}.bn1")
        x = conv2d(x, p[f"{prefix}.spatial"], groups=spec.f1)
        x = activation(self._bn(x, f"{prefix}.bn2"), "elu")
        x = avg_pool2d(x, (1, spec.pool1))
        x = _same_temporal(x, p[f"{prefix}.sep_depth"], groups=spec.f2)
        x = conv2d(x, p[f"{prefix}.sep_point"])
        x = activation(self._bn(x, f"{prefix}.bn3"), "elu")
        return avg_pool2d(x, (1, spec.pool2))


class Generator(Encoder):
    def __init__(self, spec: GeneratorSpec, seed: int = 0):
        super().__init__()
        spec.validate()
        self.spec = spec
        self.seed = seed
        rng = np.random.default_rng(seed)
        f1, f2, steps = spec.f1, spec.f2, spec.steps
        self._build_conv_stack(spec, rng, "enc")
        if spec.recurrent:
            self._gru("enc.gru_f", f2, spec.gru_hidden, rng)
            self._gru("enc.gru_b", f2, spec.gru_hidden, rng)
            self._kernel("dec.seed.W", (spec.latent, f2), rng)
            self.params["dec.seed.b"] = Tensor(np.zeros(f2), requires_grad=True)
            self._gru("dec.gru", spec.latent, f2, rng)
        else:
            self._kernel("enc.proj.W", (f2 * steps, spec.latent), rng)
            self.params["enc.proj.b"] = Tensor(np.zeros(spec.latent), requires_grad=True)
            self._kernel("dec.proj.W", (spec.latent, f2 * steps), rng)
            self.params["dec.proj.b"] = Tensor(np.zeros(f2 * steps), requires_grad=True)
        # transposed-conv kernels are [Cin, Cout, kh, kw]; fans follow that layout
        self._kernel("dec.up2", (f2, f2, 1, spec.pool2), rng)
        self._batchnorm("dec.bn1", f2)
        self._kernel("dec.up1", (f2, f1, 1, spec.pool1), rng)
        self._batchnorm("dec.bn2", f1)
        self._kernel("dec.spatial", (f1, f1, spec.channels, 1), rng)
        self._batchnorm("dec.bn3", f1)
        self._kernel("dec.temporal", (1, f1, 1, spec.temporal_kernel), rng)
        self.params["dec.out_bias"] = Tensor(np.zeros(1), requires_grad=True)

    # bottleneck -> latent
    def encode_batch(self, X) -> Tensor:
        spec = self.spec
        x = self._conv_stack(_as_batch(X, spec), spec, "enc")  # [N, F2, 1, L]
        n = x.shape[0]
        if not spec.recurrent:
            return affine(x.reshape(n, -1), self.params["enc.proj.W"], self.params["enc.proj.b"])
        seq = x.reshape(n, spec.f2, spec.steps).transpose(2, 0, 1)  # [L, N, F2]
        outputs = bigru([seq[t] for t in range(spec.steps)], self._cell("enc.gru_f"), self._cell("enc.gru_b"))
        h = spec.gru_hidden
        # final forward state (t = L) and final backward state (t = 1)
        return concat([outputs[-1][:, :h], outputs[0][:, h:]], axis=1)

    def decode_batch(self, o: Tensor) -> Tensor:
        spec = self.spec
        o = Tensor.lift(o)
        if o.ndim == 1:
            o = o.reshape(1, -1)
        if o.shape[1] != spec.latent:
            raise DimensionError(f"decode: latent extent {o.shape[1]} != {spec.latent}")
        n, f2, steps = o.shape[0], spec.f2, spec.steps
        p = self.params
        if spec.recurrent:
            h = affine(o, p["dec.seed.W"], p["dec.seed.b"]).tanh()
            cell = self._cell("dec.gru")
            frames = []
            for _ in range(steps):
                h = gru_cell(o, h, cell)
                frames.append(h)
            x = stack(frames, axis=2).reshape(n, f2, 1, steps)
        else:
            x = affine(o, p["dec.proj.W"], p["dec.proj.b"]).reshape(n, f2, 1, steps)
        x = activation(self._bn(conv2d_transpose(x, p["dec.up2"], stride=(1, spec.pool2)), "dec.bn1"), "elu")
        x = activation(self._bn(conv2d_transpose(x, p["dec.up1"], stride=(1, spec.pool1)), "dec.bn2"), "elu")
        x = activation(self._bn(conv2d_transpose(x, p["dec.spatial"]), "dec.bn3"), "elu")
        return _same_temporal(x, p["dec.temporal"]) + p["dec.out_bias"]

    def __call__(self, X) -> tuple[Tensor, Tensor]:
        o = self.encode_batch(X)
        return self.decode_batch(o), o


class Discriminator(Encoder):
    """Conv stack + global average pooling + affine + sigmoid."""

    def __init__(self, spec: GeneratorSpec, seed: int = 0):
        super().__init__()
        spec.validate()
        self.spec = spec
        rng = np.random.default_rng(seed + 7919)
        self._build_conv_stack(spec, rng, "disc")
        self._kernel("disc.head.W", (spec.f2, 1), rng)
        self.params["disc.head.b"] = Tensor(np.zeros(1), requires_grad=True)

    def __call__(self, X) -> Tensor:
        x = self._conv_stack(_as_batch(X, self.spec), self.spec, "disc")
        pooled = x.mean(axis=(2, 3))
        return affine(pooled, self.params["disc.head.W"], self.params["disc.head.b"]).reshape(-1).sigmoid()


def build_generator(spec: GeneratorSpec, seed: int = 0) -> Generator:
    return Generator(spec, seed)


def build_discriminator(spec: GeneratorSpec, seed: int = 0) -> Discriminator:
    return Discriminator(spec, seed)


# -- functional surface -------------------------------------------------------------


@dataclass
class LatentFeature:
    values: np.ndarray
    subject: str | None = None
    trial: str | None = None
    index: int | None = None


def _eval_call(module: Module, fn):
    was = module.training
    module.eval()
    try:
        with no_grad():
            return fn()
    finally:
        module.training = was


def encode(X, gen: Generator) -> np.ndarray:
    """Latent vector(s) in eval mode: ``[ℓ]`` for one segment, ``[N, ℓ]`` for a batch."""
    single = np.ndim(getattr(X, "data", X)) == 2
    out = _eval_call(gen, lambda: gen.encode_batch(X)).data
    return out[0] if single else out


def encode_many(X: np.ndarray, gen: Generator, batch_size: int = 256) -> np.ndarray:
    X = np.asarray(X, dtype=gen.dtype)
    chunks = [encode(X[i : i + batch_size], gen) for i in range(0, len(X), batch_size)]
    return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, gen.spec.latent))


def decode(o, gen: Generator) -> np.ndarray:
    single = np.ndim(getattr(o, "data", o)) == 1
    y = _eval_call(gen, lambda: gen.decode_batch(o)).data[:, 0]
    return y[0] if single else y


def autoencode(X, gen: Generator) -> tuple[np.ndarray, np.ndarray]:
    single = np.ndim(getattr(X, "data", X)) == 2
    y, o = _eval_call(gen, lambda: gen(X))
    y, o = y.data[:, 0], o.data
    return (y[0], o[0]) if single else (y, o)


def discriminate(X, disc: Discriminator):
    single = np.ndim(getattr(X, "data", X)) == 2
    p = _eval_call(disc, lambda: disc(X)).data
    return float(p[0]) if single else p


# -- checkpoints --------------------------------------------------------------------


def save_checkpoint(directory, gen: Generator, disc: Discriminator | None = None, **meta) -> Path:
    """Write ``checkpoint.json`` plus tensor blobs into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_tensors(directory / "generator.eft", gen.state_dict())
    manifest = {"spec": asdict(gen.spec), "seed": gen.seed, "generator": "generator.eft", **meta}
    if disc is not None:
        save_tensors(directory / "discriminator.eft", disc.state_dict())
        manifest["discriminator"] = "discriminator.eft"
    (directory / "checkpoint.json").write_text(json.dumps(manifest, indent=2, default=_json_default))
    return directory


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(type(obj).__name__)


def load_checkpoint(directory) -> tuple[Generator, Discriminator | None, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "checkpoint.json").read_text())
    spec = GeneratorSpec(**manifest["spec"])
    gen = Generator(spec, manifest.get("seed", 0))
    gen.load_state_dict(load_tensors(directory / manifest["generator"]))
    disc = None
    if "discriminator" in manifest:
        disc = Discriminator(spec, manifest.get("seed", 0))
        disc.load_state_dict(load_tensors(directory / manifest["discriminator"]))
    return gen.eval(), disc, manifest
