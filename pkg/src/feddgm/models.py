"""Small MLP and ConvNet architectures with flat-parameter round-tripping.

Every model is described by a ``ModelSpec`` and its weights live in a
``ParamVector`` (one flat float array plus a layout mapping slices back to
layer tensors). Flat vectors are what the matching loss compares; layer
tensors are what the forward graph consumes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

FAMILIES = ("mlp", "convnet")

_MAGIC = b"FDGM"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    """Architecture descriptor.

    mlp: ``depth`` linear layers (depth-1 hidden layers of ``width`` units).
    convnet: ``depth`` blocks of conv3x3 -> ReLU -> 2x2 mean-pool (pooling
    skipped once the spatial extent is odd or 1), then a linear head.
    """
    family: str
    depth: int
    width: int
    input_shape: tuple[int, int, int]
    classes: int

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.width < 1:
            raise ValueError("width must be >= 1")
        if self.classes < 2:
            raise ValueError("class count must be >= 2")
        if len(self.input_shape) != 3 or any(s < 1 for s in self.input_shape):
            raise ValueError(f"bad input shape {self.input_shape}")
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))


def scaled_up(spec: ModelSpec) -> ModelSpec:
    """Default larger companion model: double width, one extra layer."""
    return ModelSpec(spec.family, spec.depth + 1, spec.width * 2,
                     spec.input_shape, spec.classes)


def _conv_plan(spec: ModelSpec):
    """Per-block (in_channels, pool?) plus the flattened head input size."""
    h, w, c = spec.input_shape
    blocks = []
    cin = c
    for _ in range(spec.depth):
        pool = h % 2 == 0 and w % 2 == 0 and h > 1 and w > 1
        blocks.append((cin, pool))
        if pool:
            h, w = h // 2, w // 2
        cin = spec.width
    return blocks, h * w * spec.width


def layer_shapes(spec: ModelSpec) -> list[tuple[str, tuple[int, ...]]]:
    """Named parameter tensors in forward order; defines the flat layout."""
    shapes = []
    if spec.family == "mlp":
        d0 = int(np.prod(spec.input_shape))
        dims = [d0] + [spec.width] * (spec.depth - 1) + [spec.classes]
        for i in range(spec.depth):
            shapes.append((f"w{i}", (dims[i], dims[i + 1])))
            shapes.append((f"b{i}", (dims[i + 1],)))
    else:
        blocks, head_in = _conv_plan(spec)
        for i, (cin, _) in enumerate(blocks):
            shapes.append((f"conv{i}", (3, 3, cin, spec.width)))
            shapes.append((f"cb{i}", (spec.width,)))
        shapes.append(("head_w", (head_in, spec.classes)))
        shapes.append(("head_b", (spec.classes,)))
    return shapes


def param_count(spec: ModelSpec) -> int:
    return int(sum(np.prod(s) for _, s in layer_shapes(spec)))


@dataclass
class ParamVector:
    """Flat parameter vector with a layout for lossless unflattening."""
    values: np.ndarray
    layout: tuple[tuple[str, tuple[int, ...]], ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        expected = sum(int(np.prod(s)) for _, s in self.layout)
        if self.values.size != expected:
            raise ValueError(
                f"flat length {self.values.size} does not match layout size {expected}")

    def __len__(self):
        return self.values.size

    def tensors(self) -> list[np.ndarray]:
        """Layer tensors in layout order (copies; the flat vector is canonical)."""
        out = []
        pos = 0
        for _, shape in self.layout:
            n = int(np.prod(shape))
            out.append(self.values[pos:pos + n].reshape(shape).copy())
            pos += n
        return out

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)


def flatten_tensors(tensors, layout) -> ParamVector:
    flat = np.concatenate([np.asarray(t, dtype=np.float64).ravel() for t in tensors])
    return ParamVector(flat, tuple(layout))


def model_new(spec: ModelSpec, seed: int) -> ParamVector:
    """Deterministic scaled-uniform fan-in initialization.

    Weights use a sqrt(6/fan_in) bound (ReLU-gain uniform); without it the
    deeper pool-heavy stacks start with vanishing activations and stall.
    Biases use the conservative 1/sqrt(fan_in) bound.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, 0x6D6F64]))
    tensors = []
    layout = tuple(layer_shapes(spec))
    for name, shape in layout:
        if len(shape) == 1:
            fan_in = _fan_in_for_bias(layout, name)
            bound = 1.0 / np.sqrt(max(fan_in, 1))
        else:
            fan_in = int(np.prod(shape[:-1]))
            bound = np.sqrt(6.0 / max(fan_in, 1))
        tensors.append(rng.uniform(-bound, bound, size=shape))
    return flatten_tensors(tensors, layout)


def _fan_in_for_bias(layout, bias_name):
    names = [n for n, _ in layout]
    shapes = dict(layout)
    idx = names.index(bias_name)
    w_shape = shapes[names[idx - 1]]
    return int(np.prod(w_shape[:-1]))


def param_leaves(spec: ModelSpec, prefix: str = "p") -> list[ad.Tensor]:
    """One graph leaf per layer tensor, for binding ParamVector contents."""
    return [ad.leaf(f"{prefix}:{name}", shape) for name, shape in layer_shapes(spec)]


def param_bindings(leaves, params: ParamVector) -> dict:
    return dict(zip(leaves, params.tensors()))


def build_forward(spec: ModelSpec, param_nodes, batch: ad.Tensor,
                  with_features: bool = False):
    """Assemble the forward graph: batch (B,H,W,C) -> logits (B,classes).

    ``param_nodes`` follow ``layer_shapes`` order. With ``with_features``
    the penultimate activation is returned alongside the logits.
    """
    if batch.shape[1:] != spec.input_shape:
        raise ad.GraphError(
            f"batch shape {batch.shape} does not match input {spec.input_shape}")
    b = batch.shape[0]
    nodes = list(param_nodes)
    if spec.family == "mlp":
        x = ad.reshape(batch, (b, int(np.prod(spec.input_shape))))
        for i in range(spec.depth):
            w, bias = nodes[2 * i], nodes[2 * i + 1]
            feats = x
            x = ad.add(ad.matmul(x, w), bias)
            if i < spec.depth - 1:
                x = ad.relu(x)
        logits = x
    else:
        blocks, head_in = _conv_plan(spec)
        x = batch
        for i, (_, pool) in enumerate(blocks):
            x = ad.relu(ad.conv2d(x, nodes[2 * i], nodes[2 * i + 1]))
            if pool:
                x = ad.mean_pool2d(x)
        feats = ad.reshape(x, (b, head_in))
        logits = ad.add(ad.matmul(feats, nodes[-2]), nodes[-1])
    if with_features:
        return logits, feats
    return logits


def forward(params: ParamVector, spec: ModelSpec, batch: np.ndarray,
            dtype=np.float64) -> np.ndarray:
    """Numeric forward pass; returns logits."""
    batch = np.asarray(batch, dtype=np.float64)
    x = ad.leaf("batch", batch.shape)
    leaves = param_leaves(spec)
    logits = build_forward(spec, leaves, x)
    bindings = param_bindings(leaves, params)
    bindings[x] = batch
    return ad.evaluate(logits, bindings, dtype=dtype)


def evaluate(params: ParamVector, spec: ModelSpec, images: np.ndarray,
             labels: np.ndarray, dtype=np.float64) -> float:
    """Fraction of argmax-correct predictions; ties break toward the lowest
    class index (numpy argmax convention)."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.shape[0] == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = forward(params, spec, images, dtype=dtype)
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def onehot(labels: np.ndarray, classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    return np.eye(classes, dtype=np.float64)[labels]


# --- checkpoint format ------------------------------------------------------
# magic "FDGM" | u32 version | u8 family | u16 depth | u16 width |
# u8 rank + u32*rank input shape | u16 classes | u64 param count |
# raw little-endian float64 payload

def save_model(path, spec: ModelSpec, params: ParamVector) -> None:
    fam = FAMILIES.index(spec.family)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IBHH", _CKPT_VERSION, fam, spec.depth, spec.width))
        f.write(struct.pack("<B", len(spec.input_shape)))
        for s in spec.input_shape:
            f.write(struct.pack("<I", s))
        f.write(struct.pack("<H", spec.classes))
        f.write(struct.pack("<Q", len(params)))
        f.write(params.values.astype("<f8").tobytes())


def load_model(path) -> tuple[ModelSpec, ParamVector]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        version, fam, depth, width = struct.unpack("<IBHH", f.read(9))
        if version != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (rank,) = struct.unpack("<B", f.read(1))
        shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(rank))
        (classes,) = struct.unpack("<H", f.read(2))
        (count,) = struct.unpack("<Q", f.read(8))
        payload = np.frombuffer(f.read(count * 8), dtype="<f8")
    spec = ModelSpec(FAMILIES[fam], depth, width, shape, classes)
    expected = param_count(spec)
    if count != expected:
        raise ValueError(f"checkpoint holds {count} params, spec needs {expected}")
    return spec, ParamVector(payload.copy(), tuple(layer_shapes(spec)))
