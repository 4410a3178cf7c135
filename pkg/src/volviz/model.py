"""The 3D CNN classifier: configuration, layers, forward pass, weight files."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import (
    DataError,
    ShapeError,
    WeightsFormatError,
    WeightsShapeError,
    WeightsTruncatedError,
    WeightsVersionError,
)
from .io import atomic_write_bytes

WEIGHTS_MAGIC = b"VSW1"
WEIGHTS_VERSION = 1

BLOCK_TOKENS = ("conv", "bn", "relu", "pool")


@dataclass
class ModelConfig:
    """Architecture description.

    ``block_order`` lists the layers of each convolutional block separated by
    dashes, drawn from ``conv``, ``bn``, ``relu`` and ``pool``. It must contain
    ``conv`` exactly once; dropping ``relu`` (and setting ``fc_relu=False``)
    gives a ReLU-free ablation network.
    """

    input_shape: tuple = (32, 32, 32)
    in_channels: int = 1
    conv_channels: tuple = (8, 16, 32, 64)
    kernel: int = 3
    padding: int = 1
    pool: int = 2
    fc_sizes: tuple = (128, 64)
    n_classes: int = 2
    dropout_p: float = 0.8
    block_order: str = "conv-bn-relu-pool"
    fc_relu: bool = True
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.conv_channels = tuple(int(v) for v in self.conv_channels)
        self.fc_sizes = tuple(int(v) for v in self.fc_sizes)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("input_shape", "conv_channels", "fc_sizes"):
            d[k] = list(d[k])
        return d

    @property
    def block(self) -> list[str]:
        return self.block_order.split("-") if self.block_order else []

    def validate(self) -> None:
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError(f"input_shape must be three positive ints, got {self.input_shape}")
        if not self.conv_channels:
            raise ValueError("conv_channels must be nonempty")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must lie in [0, 1)")
        tokens = self.block
        if any(t not in BLOCK_TOKENS for t in tokens) or tokens.count("conv") != 1:
            raise ValueError(f"bad block_order {self.block_order!r}")
        if np.dtype(self.dtype) not in (np.float32, np.float64):
            raise ValueError("dtype must be float32 or float64")
        self.spatial_shapes()

    def spatial_shapes(self) -> list[tuple]:
        """Spatial dims after each block; raises when pooling exhausts them."""
        dims = list(self.input_shape)
        out = []
        for b in range(len(self.conv_channels)):
            for tok in self.block:
                if tok == "conv":
                    dims = [v + 2 * self.padding - self.kernel + 1 for v in dims]
                elif tok == "pool":
                    if self.pool > min(dims):
                        raise ShapeError(
                            f"block {b}: pooling kernel {self.pool} exceeds spatial dims {dims} "
                            f"for input {self.input_shape}")
                    dims = [(v - self.pool) // self.pool + 1 for v in dims]
                if min(dims) < 1:
                    raise ShapeError(f"block {b}: spatial dims exhausted for input {self.input_shape}")
            out.append(tuple(dims))
        return out

    def flatten_size(self) -> int:
        return self.conv_channels[-1] * int(np.prod(self.spatial_shapes()[-1]))


class Conv:
    def __init__(self, name, cin, cout, k, padding, rng, dtype):
        bound = 1.0 / np.sqrt(cin * k ** 3)
        self.weight = T.Tensor(rng.uniform(-bound, bound, (cout, cin, k, k, k)), True, dtype)
        self.bias = T.Tensor(np.zeros(cout), True, dtype)
        self.padding = padding
        self.name = name

    def params(self):
        return {f"{self.name}.weight": self.weight, f"{self.name}.bias": self.bias}

    def __call__(self, x, train, rng):
        return T.conv3d(x, self.weight, self.bias, 1, self.padding)


class BatchNorm:
    def __init__(self, name, channels, momentum, eps, dtype):
        self.gamma = T.Tensor(np.ones(channels), True, dtype)
        self.beta = T.Tensor(np.zeros(channels), True, dtype)
        self.state = T.BatchNormState(np.zeros(channels, dtype), np.ones(channels, dtype), momentum, eps)
        self.name = name

    def params(self):
        return {f"{self.name}.gamma": self.gamma, f"{self.name}.beta": self.beta}

    def buffers(self):
        return {f"{self.name}.running_mean": self.state.running_mean,
                f"{self.name}.running_var": self.state.running_var}

    def set_buffer(self, key, value):
        setattr(self.state, key.rsplit(".", 1)[1], value)

    def __call__(self, x, train, rng):
        return T.batchnorm3d(x, self.gamma, self.beta, self.state, train)


class Linear:
    def __init__(self, name, fin, fout, rng, dtype):
        bound = 1.0 / np.sqrt(fin)
        self.weight = T.Tensor(rng.uniform(-bound, bound, (fout, fin)), True, dtype)
        self.bias = T.Tensor(np.zeros(fout), True, dtype)
        self.name = name

    def params(self):
        return {f"{self.name}.weight": self.weight, f"{self.name}.bias": self.bias}

    def __call__(self, x, train, rng):
        return T.linear(x, self.weight, self.bias)


class Lambda:
    """Parameter-free layer."""

    def __init__(self, name, fn):
        self.name = name
        self.fn = fn

    def params(self):
        return {}

    def __call__(self, x, train, rng):
        return self.fn(x, train, rng)


class Model:
    """Ordered layer list ending in a softmax over ``n_classes`` outputs."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        self.mode = "eval"
        dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(config.seed)
        layers = []
        cin = config.in_channels
        for b, cout in enumerate(config.conv_channels):
            for tok in config.block:
                name = f"block{b}.{tok}"
                if tok == "conv":
                    layers.append(Conv(name, cin, cout, config.kernel, config.padding, rng, dtype))
                elif tok == "bn":
                    layers.append(BatchNorm(name, cout, config.bn_momentum, config.bn_eps, dtype))
                elif tok == "relu":
                    layers.append(Lambda(name, lambda x, tr, r: T.relu(x)))
                else:
                    k = config.pool
                    layers.append(Lambda(name, lambda x, tr, r, k=k: T.maxpool3d(x, k, k)))
            cin = cout
        layers.append(Lambda("flatten", lambda x, tr, r: T.flatten(x)))
        p = config.dropout_p
        layers.append(Lambda("dropout", lambda x, tr, r: T.dropout(x, p, tr, r)))
        fin = config.flatten_size()
        for i, fout in enumerate(config.fc_sizes):
            layers.append(Linear(f"fc{i}", fin, fout, rng, dtype))
            if config.fc_relu:
                layers.append(Lambda(f"fc{i}.relu", lambda x, tr, r: T.relu(x)))
            fin = fout
        layers.append(Linear("out", fin, config.n_classes, rng, dtype))
        self.layers = layers
        self.dtype = dtype

    def train(self) -> "Model":
        self.mode = "train"
        return self

    def eval(self) -> "Model":
        self.mode = "eval"
        return self

    def named_parameters(self) -> dict[str, T.Tensor]:
        out = {}
        for layer in self.layers:
            out.update(layer.params())
        return out

    def parameters(self) -> list[T.Tensor]:
        return list(self.named_parameters().values())

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.layers:
            if isinstance(layer, BatchNorm):
                out.update(layer.buffers())
        return out

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def _check_input(self, x: T.Tensor) -> None:
        want = (self.config.in_channels,) + self.config.input_shape
        if x.data.ndim != 5 or x.shape[1:] != want:
            raise ShapeError(f"expected batch of shape [N, {', '.join(map(str, want))}], got {list(x.shape)}")

    def logits(self, x: T.Tensor, rng: Optional[np.random.Generator] = None) -> T.Tensor:
        self._check_input(x)
        train = self.mode == "train"
        h = x
        for layer in self.layers:
            h = layer(h, train, rng)
        return h

    def forward(self, x: T.Tensor, rng: Optional[np.random.Generator] = None) -> T.Tensor:
        return T.softmax(self.logits(x, rng))

    __call__ = forward

    def predict(self, volumes: np.ndarray) -> np.ndarray:
        """Eval-mode class probabilities for a ``[N, D, H, W]`` or ``[N, C, D, H, W]`` array."""
        arr = np.asarray(volumes, dtype=self.dtype)
        if arr.ndim == 4:
            arr = arr[:, None]
        mode = self.mode
        self.eval()
        try:
            with T.no_grad():
                return self.forward(T.Tensor(arr)).data
        finally:
            self.mode = mode


def build_model(config: Optional[ModelConfig] = None) -> Model:
    return Model(config or ModelConfig())


def forward(model: Model, batch, mode: str = "eval", rng=None) -> T.Tensor:
    """Class probabilities for ``batch`` in the given mode.

    Differentiation is available through an enclosing :class:`~volviz.tensor.Tape`.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = batch if isinstance(batch, T.Tensor) else T.Tensor(np.asarray(batch, dtype=model.dtype))
    previous = model.mode
    model.mode = mode
    try:
        return model.forward(x, rng)
    finally:
        model.mode = previous


# -- weight files -------------------------------------------------------------
#
# layout: b"VSW1" | u32 little-endian header length | JSON header | f32 LE blobs


def _state(model: Model) -> dict[str, np.ndarray]:
    state = {k: v.data for k, v in model.named_parameters().items()}
    state.update(model.named_buffers())
    return state


def weights_bytes(model: Model) -> bytes:
    table, blobs, offset = [], [], 0
    for name, arr in _state(model).items():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": WEIGHTS_VERSION,
        "endianness": "little",
        "dtype": "f32",
        "config": model.config.to_dict(),
        "tensors": table,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return WEIGHTS_MAGIC + struct.pack("<I", len(hbytes)) + hbytes + b"".join(blobs)


def model_hash(model: Model) -> str:
    return hashlib.sha256(weights_bytes(model)).hexdigest()


def save_weights(model: Model, path) -> None:
    atomic_write_bytes(path, weights_bytes(model))


def load_weights(path, config: Optional[ModelConfig] = None) -> Model:
    """Read a weights file into a new model.

    With ``config`` given, the stored tensors must fit that architecture;
    otherwise the config echoed in the file is used. Nothing is returned on
    any error, so a failed load never yields a partial model.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read weights file {path}: {exc.strerror}") from None
    if raw[:4] != WEIGHTS_MAGIC:
        raise WeightsFormatError(f"{path}: bad magic bytes {raw[:4]!r}, expected {WEIGHTS_MAGIC!r}")
    if len(raw) < 8:
        raise WeightsTruncatedError(f"{path}: file ends inside the header length field")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + hlen:
        raise WeightsTruncatedError(f"{path}: header needs {hlen} bytes, only {len(raw) - 8} present")
    try:
        header = json.loads(raw[8:8 + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightsFormatError(f"{path}: unreadable header: {exc}") from None
    if header.get("format_version") != WEIGHTS_VERSION:
        raise WeightsVersionError(
            f"{path}: format_version {header.get('format_version')!r}, expected {WEIGHTS_VERSION}")
    if header.get("endianness") != "little" or header.get("dtype") != "f32":
        raise WeightsFormatError(f"{path}: unsupported endianness/dtype in header")

    stored_config = ModelConfig.from_dict(header["config"])
    model = Model(config if config is not None else stored_config)
    target = _state(model)
    entries = {e["name"]: e for e in header["tensors"]}
    if set(entries) != set(target):
        raise WeightsShapeError(f"{path}: tensor names differ from the model's "
                                f"(missing {sorted(set(target) - set(entries))}, "
                                f"extra {sorted(set(entries) - set(target))})")
    body = raw[8 + hlen:]
    loaded = {}
    for name, arr in target.items():
        e = entries[name]
        if tuple(e["shape"]) != arr.shape:
            raise WeightsShapeError(f"{path}: tensor {name} has shape {e['shape']}, model expects {list(arr.shape)}")
        nbytes = 4 * arr.size
        start = e["offset"]
        if start + nbytes > len(body):
            raise WeightsTruncatedError(f"{path}: tensor {name} needs bytes {start}..{start + nbytes}, "
                                        f"body has {len(body)}")
        loaded[name] = np.frombuffer(body, dtype="<f4", count=arr.size, offset=start).reshape(arr.shape)

    params = model.named_parameters()
    bns = {layer.name: layer for layer in model.layers if isinstance(layer, BatchNorm)}
    for name, arr in loaded.items():
        value = arr.astype(model.dtype)
        if name in params:
            params[name].data = value
        else:
            bns[name.rsplit(".", 1)[0]].set_buffer(name, value)
    return model
