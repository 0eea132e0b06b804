"""The compact crowd-counting CNN: config, parameters, forward pass, checkpoints."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .tensor import DTYPE, ConvLayer, GradTape, concat_channels, conv2d_forward, maxpool2x2, relu

CKPT_MAGIC = b"CCN1"
CKPT_VERSION = 1

ABLATIONS = ("only5", "only7", "only9", "no_last_pool", "full")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CCNNConfig:
    front_branches: tuple[tuple[int, int], ...] = ((9, 10), (7, 14), (5, 16))
    backend: tuple[tuple[int, int], ...] = ((3, 32), (3, 32), (3, 64), (3, 32), (3, 16), (1, 1))
    pool_after_backend: frozenset[int] = frozenset({3, 4})
    include_last_pool: bool = True
    input_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "front_branches", tuple(tuple(map(int, b)) for b in self.front_branches))
        object.__setattr__(self, "backend", tuple(tuple(map(int, b)) for b in self.backend))
        object.__setattr__(self, "pool_after_backend", frozenset(int(i) for i in self.pool_after_backend))

    def validate(self) -> "CCNNConfig":
        if not self.front_branches:
            raise ConfigError("front_branches must contain at least one branch")
        if not self.backend:
            raise ConfigError("backend must contain at least one layer")
        for k, c in self.front_branches + self.backend:
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"kernel sizes must be odd and positive, got {k}")
            if c < 1:
                raise ConfigError(f"channel counts must be positive, got {c}")
        if self.backend[-1] != (1, 1):
            raise ConfigError(
                f"last backend layer must be a 1x1 conv with 1 output channel, got {self.backend[-1]}"
            )
        bad = sorted(i for i in self.pool_after_backend if not 1 <= i < len(self.backend))
        if bad:
            raise ConfigError(f"pool_after_backend indices {bad} outside 1..{len(self.backend) - 1}")
        if self.input_channels not in (1, 3):
            raise ConfigError(f"input_channels must be 1 or 3, got {self.input_channels}")
        return self

    @property
    def active_pools(self) -> frozenset[int]:
        if self.include_last_pool or not self.pool_after_backend:
            return self.pool_after_backend
        return self.pool_after_backend - {max(self.pool_after_backend)}

    @property
    def downsampling(self) -> int:
        return 2 ** (1 + len(self.active_pools))

    @property
    def fused_channels(self) -> int:
        return sum(c for _, c in self.front_branches)

    def layer_shapes(self) -> list[tuple[str, tuple[int, int, int, int]]]:
        """(name, weight shape) for every conv, in parameter order."""
        shapes = []
        for k, c in sorted(self.front_branches, key=lambda b: -b[0]):
            shapes.append((f"front.k{k}", (c, self.input_channels, k, k)))
        cin = self.fused_channels
        for i, (k, c) in enumerate(self.backend, start=1):
            shapes.append((f"backend.{i}", (c, cin, k, k)))
            cin = c
        return shapes

    def to_dict(self) -> dict:
        return {
            "front_branches": [list(b) for b in self.front_branches],
            "backend": [list(b) for b in self.backend],
            "pool_after_backend": sorted(self.pool_after_backend),
            "include_last_pool": self.include_last_pool,
            "input_channels": self.input_channels,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "CCNNConfig":
        known = {"front_branches", "backend", "pool_after_backend", "include_last_pool", "input_channels"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        default = cls()
        return cls(
            front_branches=d.get("front_branches", default.front_branches),
            backend=d.get("backend", default.backend),
            pool_after_backend=d.get("pool_after_backend", default.pool_after_backend),
            include_last_pool=bool(d.get("include_last_pool", True)),
            input_channels=int(d.get("input_channels", 1)),
        ).validate()


def conv_stack_parameters(layers: Iterable[tuple[int, int, int]]) -> int:
    """Parameter count of (kernel, in_channels, out_channels) conv layers with bias."""
    return sum((k * k * cin + 1) * cout for k, cin, cout in layers)


def count_parameters(config: CCNNConfig) -> int:
    config.validate()
    return conv_stack_parameters((s[2], s[1], s[0]) for _, s in config.layer_shapes())


def ablation_variant(which: str) -> CCNNConfig:
    default = CCNNConfig()
    if which == "full":
        return default
    if which == "no_last_pool":
        return CCNNConfig(include_last_pool=False)
    if which in ("only5", "only7", "only9"):
        return CCNNConfig(front_branches=((int(which[-1]), default.fused_channels),))
    raise ConfigError(f"unknown ablation variant {which!r}; expected one of {ABLATIONS}")


@dataclass
class ModelParams:
    config: CCNNConfig
    layers: list[ConvLayer] = field(default_factory=list)

    def __iter__(self):
        return iter(self.layers)

    def __getitem__(self, name: str) -> ConvLayer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    @property
    def front(self) -> list[ConvLayer]:
        return [l for l in self.layers if l.name.startswith("front.")]

    @property
    def backend(self) -> list[ConvLayer]:
        return [l for l in self.layers if l.name.startswith("backend.")]

    def size(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)

    def flatten(self) -> np.ndarray:
        return np.concatenate([np.concatenate([l.weight.ravel(), l.bias.ravel()]) for l in self.layers])

    def assign(self, flat: np.ndarray) -> None:
        """Overwrite all weights in place from a flat vector in :meth:`flatten` order."""
        if flat.size != self.size():
            raise ValueError(f"flat vector has {flat.size} entries, model has {self.size()}")
        off = 0
        for l in self.layers:
            nw, nb = l.weight.size, l.bias.size
            l.weight[...] = flat[off : off + nw].reshape(l.weight.shape)
            l.bias[...] = flat[off + nw : off + nw + nb]
            off += nw + nb

    def copy(self, dtype=None) -> "ModelParams":
        dtype = dtype or self.layers[0].weight.dtype
        return ModelParams(self.config, [l.astype(dtype) for l in self.layers])

    def flat_grads(self, grads) -> np.ndarray:
        parts = []
        for l in self.layers:
            if l in grads:
                dw, db = grads.layer(l)
            else:
                dw, db = np.zeros_like(l.weight), np.zeros_like(l.bias)
            parts += [np.ravel(dw), np.ravel(db)]
        return np.concatenate(parts)


def build(config: CCNNConfig | None = None, seed: int = 0, std: float = 0.01) -> ModelParams:
    """Fresh parameters: N(0, std) weights, zero biases, deterministic per seed."""
    config = (config or CCNNConfig()).validate()
    rng = np.random.default_rng(seed)
    layers = []
    for name, shape in config.layer_shapes():
        w = (rng.standard_normal(shape) * std).astype(DTYPE)
        layers.append(ConvLayer(w, np.zeros(shape[0], DTYPE), name))
    return ModelParams(config, layers)


def front_features(params: ModelParams, image: np.ndarray, tape: GradTape | None = None) -> np.ndarray:
    """Fused output of the parallel front branches (conv, ReLU, 2x2 pool, then concat)."""
    branches = []
    for layer in params.front:
        branches.append(maxpool2x2(relu(conv2d_forward(image, layer, tape), tape), tape))
    return concat_channels(branches, tape)


def forward(params: ModelParams, image: np.ndarray, tape: GradTape | None = None) -> np.ndarray:
    """Predicted density map batch (n, 1, h/f, w/f), ``f`` the config's downsampling."""
    config = params.config
    if image.ndim != 4:
        raise ValueError(f"image must be (n, c, h, w), got shape {image.shape}")
    n, c, h, w = image.shape
    if c != config.input_channels:
        raise ValueError(f"image has {c} channels, model expects {config.input_channels}")
    f = config.downsampling
    if h % f or w % f:
        raise ValueError(
            f"image {h}x{w} is not divisible by {f}; center-crop it to a multiple of {f} first"
        )
    return backend_forward(params, front_features(params, image, tape), tape)


def backend_forward(params: ModelParams, fused: np.ndarray, tape: GradTape | None = None) -> np.ndarray:
    """Backend convs (ReLU after each, pools after the configured layers) on fused features."""
    pools = params.config.active_pools
    x = fused
    for i, layer in enumerate(params.backend, start=1):
        x = relu(conv2d_forward(x, layer, tape), tape)
        if i in pools:
            x = maxpool2x2(x, tape)
    return x


def predict_count(params: ModelParams, image: np.ndarray) -> np.ndarray:
    """Per-image predicted counts (density sums) for an (n, c, h, w) batch."""
    return forward(params, image).sum(axis=(1, 2, 3), dtype=np.float64)


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ManifestMismatchError(CheckpointError):
    pass


def save_checkpoint(params: ModelParams, path) -> None:
    """Write magic, version, length-prefixed header JSON, then f32 weights/bias per layer."""
    header = {
        "config": params.config.to_dict(),
        "layers": [[l.name, list(l.weight.shape)] for l in params.layers],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for l in params.layers:
            f.write(np.ascontiguousarray(l.weight, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(l.bias, dtype="<f4").tobytes())


def load_checkpoint(path) -> ModelParams:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise BadMagicError(f"{path}: bad magic {buf[:4]!r}, expected {CKPT_MAGIC!r}")
    if len(buf) < 12:
        raise TruncatedCheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version}")
    if len(buf) < 12 + hlen:
        raise TruncatedCheckpointError(f"{path}: truncated header JSON")
    try:
        header = json.loads(buf[12 : 12 + hlen].decode("utf-8"))
        config = CCNNConfig.from_dict(header["config"])
        manifest = [(name, tuple(shape)) for name, shape in header["layers"]]
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: unreadable header ({e})") from None
    expected = config.layer_shapes()
    if manifest != expected:
        raise ManifestMismatchError(
            f"{path}: layer manifest {manifest} does not match config layers {expected}"
        )
    need = sum(4 * (int(np.prod(s)) + s[0]) for _, s in expected)
    body = memoryview(buf)[12 + hlen :]
    if len(body) < need:
        raise TruncatedCheckpointError(f"{path}: expected {need} bytes of weights, found {len(body)}")
    if len(body) > need:
        raise ManifestMismatchError(
            f"{path}: {len(body) - need} trailing bytes beyond the declared layer manifest"
        )
    layers, off = [], 0
    for name, shape in expected:
        nw = int(np.prod(shape))
        w = np.frombuffer(body, "<f4", nw, off).reshape(shape).astype(DTYPE)
        off += 4 * nw
        b = np.frombuffer(body, "<f4", shape[0], off).astype(DTYPE)
        off += 4 * shape[0]
        layers.append(ConvLayer(w, b, name))
    return ModelParams(config, layers)
