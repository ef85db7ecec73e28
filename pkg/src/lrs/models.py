"""Small surrogate/target networks and their binary checkpoint format."""
from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

MAGIC = b"LRSCKPT\0"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class UnknownArchitecture(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    input_shape: tuple = (1, 28, 28)
    num_classes: int = 10
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(n) for n in self.input_shape))
        if self.arch not in ARCHITECTURES:
            raise UnknownArchitecture(
                f"unknown architecture {self.arch!r}; registered: {sorted(ARCHITECTURES)}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if len(self.input_shape) != 3:
            raise ValueError(f"input_shape must be (C, H, W), got {self.input_shape}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelSpec":
        return cls(d["arch"], tuple(d["input_shape"]), int(d["num_classes"]), int(d["seed"]))


# ---------------------------------------------------------------------------
# layers


def _kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Linear:
    def __init__(self, name, n_in, n_out, rng):
        self.weight = Parameter(_kaiming_uniform(rng, (n_out, n_in), n_in), f"{name}.weight")
        self.bias = Parameter(np.zeros(n_out, np.float32), f"{name}.bias")

    def params(self):
        return [self.weight, self.bias]

    def __call__(self, x):
        return ad.add(ad.matmul(x, ad.transpose(self.weight)), self.bias)


class Conv3x3:
    def __init__(self, name, c_in, c_out, rng):
        self.weight = Parameter(_kaiming_uniform(rng, (c_out, c_in, 3, 3), c_in * 9), f"{name}.weight")
        self.bias = Parameter(np.zeros(c_out, np.float32), f"{name}.bias")

    def params(self):
        return [self.weight, self.bias]

    def __call__(self, x):
        return ad.conv2d(x, self.weight, self.bias, stride=1, pad=1)


class _Fn:
    def __init__(self, fn):
        self.fn = fn

    def params(self):
        return []

    def __call__(self, x):
        return self.fn(x)


RELU = _Fn(ad.relu)
POOL = _Fn(ad.maxpool2)
FLAT = _Fn(ad.flatten)


def _mlp(widths):
    def build(spec, rng):
        c, h, w = spec.input_shape
        dims = [c * h * w, *widths]
        layers = [FLAT]
        for i in range(len(widths)):
            layers += [Linear(f"fc{i + 1}", dims[i], dims[i + 1], rng), RELU]
        layers.append(Linear(f"fc{len(widths) + 1}", dims[-1], spec.num_classes, rng))
        return layers
    return build


def _cnn(c1, c2):
    def build(spec, rng):
        c, h, w = spec.input_shape
        if h % 4 or w % 4:
            raise ValueError(f"CNN architectures need H and W divisible by 4, got {spec.input_shape}")
        return [
            Conv3x3("conv1", c, c1, rng), RELU, POOL,
            Conv3x3("conv2", c1, c2, rng), RELU, POOL,
            FLAT,
            Linear("fc1", c2 * (h // 4) * (w // 4), spec.num_classes, rng),
        ]
    return build


ARCHITECTURES = {
    "mlp-2x256": _mlp([256, 256]),
    "mlp-deep": _mlp([128, 128, 128, 128]),
    "cnn-small": _cnn(8, 16),
    "cnn-wide": _cnn(16, 32),
}


class Model:
    """A feed-forward classifier producing logits for NCHW inputs in [0, 1]."""

    def __init__(self, spec: ModelSpec, layers: list, provenance: str = "init", meta: dict | None = None):
        self.spec = spec
        self.layers = layers
        self.provenance = provenance
        self.meta = dict(meta or {})

    @property
    def params(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.params()]

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.params}

    def __call__(self, x: Tensor) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if tuple(x.shape[1:]) != self.spec.input_shape:
            raise ad.ShapeError(
                f"forward: input shape {x.shape} does not match model input (N, *{self.spec.input_shape})")
        for layer in self.layers:
            x = layer(x)
        return x

    @property
    def dtype(self):
        return self.params[0].dtype

    def astype(self, dtype) -> "Model":
        """Copy with every parameter cast to ``dtype`` (64-bit for gradient checks)."""
        other = self.copy()
        for p in other.params:
            p.data = p.data.astype(dtype)
        return other

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def predict(self, x, batch_size: int = 1000) -> np.ndarray:
        return np.concatenate([
            forward(self, x[i:i + batch_size]).data.argmax(axis=1)
            for i in range(0, len(x), batch_size)
        ])

    def accuracy(self, x, y) -> float:
        return float(np.mean(self.predict(x) == np.asarray(y)))

    def __repr__(self):
        return f"Model({self.spec.arch!r}, provenance={self.provenance!r})"


def build(spec: ModelSpec) -> Model:
    rng = np.random.default_rng(spec.seed)
    return Model(spec, ARCHITECTURES[spec.arch](spec, rng))


def forward(model: Model, x) -> Tensor:
    """Logits of shape (batch, classes), computed without recording."""
    with ad.no_record():
        return model(x)


def parameters_equal(a: Model, b: Model) -> bool:
    pa, pb = a.named_parameters(), b.named_parameters()
    return pa.keys() == pb.keys() and all(
        pa[k].data.dtype == pb[k].data.dtype and pa[k].data.tobytes() == pb[k].data.tobytes() for k in pa)


# ---------------------------------------------------------------------------
# binary tensor-record container


def write_records(path, header: dict, records: list[tuple[str, np.ndarray]]) -> None:
    """Write the container: magic, u16 version, u32-prefixed JSON header, records.

    Each record is a u32-prefixed UTF-8 name, u8 rank, u32 extents and a raw
    little-endian float32 payload.
    """
    header = dict(header, n_records=len(records))
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<H", FORMAT_VERSION), struct.pack("<I", len(blob)), blob]
    for name, arr in records:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw, struct.pack("<B", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(parts))


def read_records(path, expected_version: int = FORMAT_VERSION) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint {path}: needed {n} bytes at byte {pos}, file has {len(buf)}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    take(len(MAGIC))
    (version,) = struct.unpack("<H", take(2))
    if version != expected_version:
        raise CheckpointError(
            f"unsupported checkpoint version {version} in {path}; this reader supports version {expected_version}")
    (hlen,) = struct.unpack("<I", take(4))
    try:
        header = json.loads(take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header in {path}: {exc}") from None
    records = []
    for _ in range(int(header.get("n_records", 0))):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
        records.append((name, arr))
    if pos != len(buf):
        raise CheckpointError(f"trailing bytes in {path} after byte {pos}")
    return header, records


def save_checkpoint(model: Model, path) -> None:
    header = {"kind": "model", "spec": model.spec.to_json(),
              "provenance": model.provenance, "meta": model.meta}
    write_records(path, header, [(p.name, p.data) for p in model.params])


def load_checkpoint(path, expected_version: int = FORMAT_VERSION) -> Model:
    header, records = read_records(path, expected_version)
    if header.get("kind") != "model":
        raise CheckpointError(f"{path} holds {header.get('kind')!r} records, not a model")
    model = build(ModelSpec.from_json(header["spec"]))
    params = model.named_parameters()
    names = [name for name, _ in records]
    if names != list(params):
        raise CheckpointError(f"parameter names in {path} {names} do not match architecture {list(params)}")
    for name, arr in records:
        if arr.shape != params[name].shape:
            raise CheckpointError(
                f"shape mismatch for {name}: file has {arr.shape}, architecture expects {params[name].shape}")
        params[name].data = arr
    model.provenance = header.get("provenance", "init")
    model.meta = header.get("meta", {})
    return model
