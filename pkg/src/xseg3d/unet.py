"""3D UNet with strided-conv downsampling and transposed-conv upsampling.

Each level is one block of 3x3x3 conv -> batch norm -> dropout -> PReLU.
The deepest encoder block is the bottleneck. Decoder levels upsample with a
transposed conv whose kernel equals the stride, concatenate the matching
encoder output (skip first, then the upsampled map) and apply another block.
A 1x1x1 head maps to one logit channel per organ class.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import container
from .errors import ConfigError, FormatError, ShapeError, WeightShapeError
from .rng import Rng
from .tensor import Tensor, batch_norm, concat, conv3d, conv_transpose3d, dropout, prelu

CLASS_NAMES = ("large_bowel", "small_bowel", "stomach")


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 1
    out_channels: int = 3
    levels: int = 5
    channels_per_level: tuple[int, ...] = (32, 64, 128, 256, 512)
    down_strides: tuple[tuple[int, int, int], ...] = ((2, 2, 2),) * 4
    dropout_p: float = 0.2
    norm: str = "batch"
    activation: str = "prelu"
    prelu_init: float = 0.25
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    # initial foreground probability per class; sets the head bias to its logit
    head_prior: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "channels_per_level", tuple(int(c) for c in self.channels_per_level))
        object.__setattr__(
            self, "down_strides", tuple(tuple(int(s) for s in st) for st in self.down_strides)
        )
        self.validate()

    def validate(self):
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if self.levels != len(self.channels_per_level):
            raise ConfigError(
                f"levels == len(channels_per_level) violated: {self.levels} != {len(self.channels_per_level)}"
            )
        if len(self.down_strides) != self.levels - 1:
            raise ConfigError(
                f"len(down_strides) == levels - 1 violated: {len(self.down_strides)} != {self.levels - 1}"
            )
        if any(len(s) != 3 or min(s) < 1 for s in self.down_strides):
            raise ConfigError("down_strides must be positive triples")
        if min(self.channels_per_level) < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be positive")
        if not 0 <= self.dropout_p < 1:
            raise ConfigError("dropout_p must be in [0, 1)")
        if not 0 < self.head_prior < 1:
            raise ConfigError("head_prior must be in (0, 1)")
        if self.norm != "batch":
            raise ConfigError(f"unsupported norm {self.norm!r}")
        if self.activation != "prelu":
            raise ConfigError(f"unsupported activation {self.activation!r}")

    def required_multiple(self) -> tuple[int, int, int]:
        mult = [1, 1, 1]
        for st in self.down_strides:
            for ax in range(3):
                mult[ax] *= st[ax]
        return tuple(mult)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels_per_level"] = list(self.channels_per_level)
        d["down_strides"] = [list(s) for s in self.down_strides]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(**d)


TINY_CONFIG = UNetConfig(levels=3, channels_per_level=(4, 8, 16), down_strides=((2, 2, 2),) * 2, dropout_p=0.0)


def block_names(config: UNetConfig) -> tuple[list[str], list[str]]:
    enc = [f"enc{i}" for i in range(config.levels - 1)] + ["bottleneck"]
    dec = [f"dec{i}" for i in reversed(range(config.levels - 1))]
    return enc, dec


def layer_names(config: UNetConfig) -> list[str]:
    """Names of the activations a forward pass records, in execution order."""
    enc, _ = block_names(config)
    names = list(enc)
    for i in reversed(range(config.levels - 1)):
        names += [f"up{i}", f"dec{i}"]
    return names + ["logits"]


def parameter_shapes(config: UNetConfig) -> dict[str, tuple[int, ...]]:
    """Trainable parameter shapes in canonical order."""
    shapes: dict[str, tuple[int, ...]] = {}
    ch = config.channels_per_level
    enc, _ = block_names(config)

    def block(name, cin, cout):
        shapes[f"{name}.conv.weight"] = (cout, cin, 3, 3, 3)
        shapes[f"{name}.bn.weight"] = (cout,)
        shapes[f"{name}.bn.bias"] = (cout,)
        shapes[f"{name}.act.alpha"] = (cout,)

    cin = config.in_channels
    for i, name in enumerate(enc):
        block(name, cin, ch[i])
        cin = ch[i]
    for i in reversed(range(config.levels - 1)):
        shapes[f"up{i}.weight"] = (ch[i + 1], ch[i]) + config.down_strides[i]
        shapes[f"up{i}.bias"] = (ch[i],)
        block(f"dec{i}", 2 * ch[i], ch[i])
    shapes["head.weight"] = (config.out_channels, ch[0], 1, 1, 1)
    shapes["head.bias"] = (config.out_channels,)
    return shapes


def buffer_shapes(config: UNetConfig) -> dict[str, tuple[int, ...]]:
    enc, dec = block_names(config)
    out = {}
    for name, c in list(zip(enc, config.channels_per_level)) + [
        (f"dec{i}", config.channels_per_level[i]) for i in reversed(range(config.levels - 1))
    ]:
        out[f"{name}.bn.running_mean"] = (c,)
        out[f"{name}.bn.running_var"] = (c,)
    return out


def infer_shapes(config: UNetConfig, input_shape) -> dict[str, tuple[int, ...]]:
    """Activation shapes from the conv extent formulas alone (no computation)."""
    n, c, *spatial = input_shape
    if c != config.in_channels:
        raise ShapeError(f"expected {config.in_channels} input channels, got {c}", axis="C")
    _check_divisible(config, spatial)
    ch = config.channels_per_level
    enc, _ = block_names(config)
    shapes = {}
    cur = list(spatial)
    skips = []
    for i, name in enumerate(enc):
        st = (1, 1, 1) if i == 0 else config.down_strides[i - 1]
        cur = [(e + 2 - 3) // s + 1 for e, s in zip(cur, st)]
        shapes[name] = (n, ch[i], *cur)
        skips.append(list(cur))
    for i in reversed(range(config.levels - 1)):
        st = config.down_strides[i]
        cur = [(e - 1) * s + s for e, s in zip(cur, st)]
        shapes[f"up{i}"] = (n, ch[i], *cur)
        if cur != skips[i]:
            raise ShapeError(f"decoder level {i} extent {cur} != skip extent {skips[i]}")
        shapes[f"dec{i}"] = (n, ch[i], *cur)
    shapes["logits"] = (n, config.out_channels, *cur)
    return shapes


def _check_divisible(config: UNetConfig, spatial):
    mult = config.required_multiple()
    for ax, (e, m) in enumerate(zip(spatial, mult)):
        if e % m:
            raise ShapeError(
                f"input extent {e} on axis {'DHW'[ax]} is not a multiple of {m}", axis="DHW"[ax]
            )


def _kaiming_uniform(rng: Rng, shape, fan_in, gain, dtype):
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class UNet3D:
    """Parameters live in ``params`` (leaf tensors), running statistics in ``buffers``."""

    def __init__(self, config: UNetConfig, params: dict[str, Tensor], buffers: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self.buffers = buffers

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: np.array(p.data) for k, p in self.params.items()}
        out.update({k: np.array(b) for k, b in self.buffers.items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = {**parameter_shapes(self.config), **buffer_shapes(self.config)}
        missing = sorted(set(expected) - set(state))
        extra = sorted(set(state) - set(expected))
        if missing or extra:
            raise FormatError(f"weight names differ from config: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if tuple(state[name].shape) != tuple(shape):
                raise WeightShapeError(name, shape, state[name].shape)
        dtype = self.dtype
        for name in self.params:
            self.params[name] = Tensor(state[name], requires_grad=True, dtype=dtype, name=name)
        for name in self.buffers:
            self.buffers[name] = np.array(state[name], dtype=dtype)

    def astype(self, dtype) -> "UNet3D":
        params = {k: Tensor(p.data, requires_grad=True, dtype=dtype, name=k) for k, p in self.params.items()}
        buffers = {k: np.array(b, dtype=dtype) for k, b in self.buffers.items()}
        return UNet3D(self.config, params, buffers)

    def copy(self) -> "UNet3D":
        return self.astype(self.dtype)

    def _block(self, h, name, stride, P, training, rng, new_stats):
        cfg = self.config
        h = conv3d(h, P[f"{name}.conv.weight"], None, stride=stride, padding=1)
        h, stats = batch_norm(
            h,
            P[f"{name}.bn.weight"],
            P[f"{name}.bn.bias"],
            self.buffers[f"{name}.bn.running_mean"],
            self.buffers[f"{name}.bn.running_var"],
            training=training,
            momentum=cfg.bn_momentum,
            eps=cfg.bn_eps,
        )
        if training:
            new_stats[f"{name}.bn.running_mean"], new_stats[f"{name}.bn.running_var"] = stats
        if training and cfg.dropout_p > 0:
            h = dropout(h, cfg.dropout_p, True, rng.split(name))
        return prelu(h, P[f"{name}.act.alpha"])

    def forward(
        self,
        x,
        training: bool = False,
        rng: Optional[Rng] = None,
        params: Optional[dict[str, Tensor]] = None,
        activations: Optional[dict[str, Tensor]] = None,
        update_stats: bool = True,
    ) -> Tensor:
        """Logits for ``x`` of shape (N, in_channels, D, H, W).

        ``params`` overrides the stored parameters (used by gradient checks);
        ``activations``, if given, is filled with every named block output.
        """
        cfg = self.config
        x = x if isinstance(x, Tensor) else Tensor(x, dtype=self.dtype)
        if x.ndim != 5:
            raise ShapeError(f"expected N C D H W input, got shape {x.shape}")
        if x.shape[1] != cfg.in_channels:
            raise ShapeError(f"expected {cfg.in_channels} input channels, got {x.shape[1]}", axis="C")
        _check_divisible(cfg, x.shape[2:])
        if training and rng is None and cfg.dropout_p > 0:
            raise ValueError("training-mode forward needs an rng for dropout")
        P = self.params if params is None else params
        acts = {} if activations is None else activations
        new_stats: dict[str, np.ndarray] = {}
        enc, _ = block_names(cfg)
        skips = []
        h = x
        for i, name in enumerate(enc):
            stride = (1, 1, 1) if i == 0 else cfg.down_strides[i - 1]
            h = self._block(h, name, stride, P, training, rng, new_stats)
            acts[name] = h
            skips.append(h)
        for i in reversed(range(cfg.levels - 1)):
            st = cfg.down_strides[i]
            h = conv_transpose3d(h, P[f"up{i}.weight"], P[f"up{i}.bias"], stride=st, padding=0)
            acts[f"up{i}"] = h
            h = concat([skips[i], h], axis=1)
            h = self._block(h, f"dec{i}", (1, 1, 1), P, training, rng, new_stats)
            acts[f"dec{i}"] = h
        logits = conv3d(h, P["head.weight"], P["head.bias"])
        acts["logits"] = logits
        if training and update_stats:
            self.buffers.update(new_stats)
        return logits

    __call__ = forward


def build(config: UNetConfig, rng: Rng, dtype=np.float32) -> UNet3D:
    """Fresh model with Kaiming-uniform (PReLU gain) weights."""
    config.validate()
    dtype = np.dtype(dtype)
    a = config.prelu_init
    prelu_gain = math.sqrt(2.0 / (1 + a * a))
    params: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(config).items():
        r = rng.split(name)
        if name.endswith(".conv.weight"):
            fan_in = shape[1] * 27
            arr = _kaiming_uniform(r, shape, fan_in, prelu_gain, dtype)
        elif name.startswith("up") and name.endswith(".weight"):
            fan_in = shape[0]
            arr = _kaiming_uniform(r, shape, fan_in, prelu_gain, dtype)
        elif name == "head.weight":
            arr = _kaiming_uniform(r, shape, shape[1], 1.0, dtype)
        elif name == "head.bias":
            p = config.head_prior
            arr = np.full(shape, math.log(p / (1 - p)), dtype)
        elif name.endswith(".bias") and not name.endswith(".bn.bias"):
            fan_in = parameter_shapes(config)[name[:-5] + ".weight"][0]
            bound = 1 / math.sqrt(fan_in)
            arr = r.uniform(-bound, bound, size=shape).astype(dtype)
        elif name.endswith(".bn.weight"):
            arr = np.ones(shape, dtype)
        elif name.endswith(".bn.bias"):
            arr = np.zeros(shape, dtype)
        elif name.endswith(".act.alpha"):
            arr = np.full(shape, a, dtype)
        else:  # pragma: no cover - parameter_shapes is exhaustive
            raise AssertionError(name)
        params[name] = Tensor(arr, requires_grad=True, dtype=dtype, name=name)
    buffers = {
        name: (np.zeros(shape, dtype) if name.endswith("mean") else np.ones(shape, dtype))
        for name, shape in buffer_shapes(config).items()
    }
    return UNet3D(config, params, buffers)


@dataclass
class Checkpoint:
    config: UNetConfig
    weights: dict[str, np.ndarray]
    optimizer_state: object = None
    epoch: int = 0
    rng_seed: int = 0
    format_version: int = container.FORMAT_VERSION
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: UNet3D, **kw) -> "Checkpoint":
        return cls(model.config, model.state_dict(), **kw)

    def to_model(self) -> UNet3D:
        dtype = next(iter(self.weights.values())).dtype
        model = build(self.config, Rng(0), dtype=dtype)
        model.load_state_dict(self.weights)
        return model


def save(checkpoint: Checkpoint, path) -> None:
    tensors = {f"model/{k}": v for k, v in checkpoint.weights.items()}
    meta = {
        "kind": "checkpoint",
        "config": checkpoint.config.to_dict(),
        "epoch": int(checkpoint.epoch),
        "rng_seed": int(checkpoint.rng_seed),
        "extra": checkpoint.extra,
    }
    if checkpoint.optimizer_state is not None:
        arrays, ometa = checkpoint.optimizer_state.to_arrays()
        tensors.update(arrays)
        meta["optimizer"] = ometa
    container.save(path, tensors, meta)


def load(path) -> Checkpoint:
    from .training.optim import OptimizerState

    tensors, meta = container.load(path)
    if meta.get("kind") != "checkpoint":
        raise FormatError(f"{Path(path).name} is not a checkpoint container")
    config = UNetConfig.from_dict(meta["config"])
    weights = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    expected = {**parameter_shapes(config), **buffer_shapes(config)}
    for name, arr in weights.items():
        if name in expected and tuple(arr.shape) != tuple(expected[name]):
            raise WeightShapeError(name, expected[name], arr.shape)
    missing = sorted(set(expected) - set(weights))
    if missing:
        raise FormatError(f"checkpoint is missing weights {missing}")
    opt = OptimizerState.from_arrays(tensors, meta["optimizer"]) if "optimizer" in meta else None
    return Checkpoint(
        config,
        weights,
        optimizer_state=opt,
        epoch=int(meta["epoch"]),
        rng_seed=int(meta["rng_seed"]),
        format_version=container.FORMAT_VERSION,
        extra=meta.get("extra", {}),
    )
