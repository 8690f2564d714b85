"""Network container, the three compared architectures and model persistence.

The model file is a little-endian binary format:

    magic "FEMO" | version u32 | arch-json length u32 | arch json (utf-8)
    | tensor count u32 | per tensor: rank u32, dims u32*, float32 payload

The arch json records the layer stack, input shape and class count, so a
load rebuilds the exact network and restores bit-identical parameters.
"""

import json
import struct

import numpy as np

from . import layers as L
from .layers import LayerSpec, ShapeError, cross_entropy_loss, softmax_xent_grad
from .seeding import derive_seed

MAGIC = b"FEMO"
FORMAT_VERSION = 1
NUM_CLASSES = 7
INPUT_SHAPE = (1, 48, 48)
_MAX_DIM = 1 << 31
_MAX_ELEMENTS = 1 << 31


class ModelFileError(Exception):
    """Base class for persistence failures."""


class BadMagicError(ModelFileError):
    pass


class VersionMismatchError(ModelFileError):
    pass


class TruncatedFileError(ModelFileError):
    pass


class DimOverflowError(ModelFileError):
    pass


class Network:
    """Ordered layer stack with build-time shape validation.

    The final layer must be a softmax over ``num_classes`` outputs; any
    adjacent shape incompatibility raises at build, not at first forward.
    """

    def __init__(self, specs: list[LayerSpec], input_shape=INPUT_SHAPE, num_classes=NUM_CLASSES):
        self.specs = specs
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.layers: list[L.Layer] = [spec.materialize() for spec in specs]
        self.built = False

    def build(self, seed: int = 0) -> "Network":
        rng = np.random.default_rng(derive_seed(seed, "init"))
        shape = self.input_shape
        trace = [shape]
        for layer in self.layers:
            shape = layer.build(shape, rng)
            trace.append(shape)
        if not self.layers or self.layers[-1].kind != "softmax":
            raise ShapeError("network must end in a softmax layer")
        if shape != (self.num_classes,):
            raise ShapeError(f"final layer has shape {shape}, expected ({self.num_classes},)")
        self._trace = trace
        self.built = True
        return self

    def shape_trace(self) -> list[tuple[int, ...]]:
        """Input shape followed by each layer's output shape."""
        self._require_built()
        return list(self._trace)

    def parameters(self) -> list[np.ndarray]:
        self._require_built()
        return [p for layer in self.layers for p in layer.params]

    def gradients(self) -> list[np.ndarray]:
        self._require_built()
        return [g for layer in self.layers for g in layer.grads]

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def l2_terms(self):
        return [term for layer in self.layers for term in layer.l2_terms()]

    def forward(self, x: np.ndarray, train: bool = False, rng=None) -> np.ndarray:
        self._require_built()
        if rng is None:
            rng = np.random.default_rng(0)
        out = x
        for layer in self.layers:
            out = layer.forward(out, train, rng)
        return out

    def predict(self, image: np.ndarray) -> np.ndarray:
        """Class probabilities for one preprocessed [1,48,48] image."""
        if image.shape != self.input_shape:
            raise ShapeError(f"expected input shape {self.input_shape}, got {image.shape}")
        return self.forward(image, train=False)

    def loss_and_grad(self, x: np.ndarray, target_onehot: np.ndarray, rng=None):
        """Mean cross-entropy over the batch; fills every layer's grads.

        Uses the fused softmax/cross-entropy adjoint: the gradient at the
        logits is (probs - target) / batch, injected below the softmax.
        """
        probs = self.forward(x, train=True, rng=rng)
        loss = cross_entropy_loss(probs, target_onehot, self.l2_terms())
        batch = probs.shape[0] if probs.ndim == 2 else 1
        grad = softmax_xent_grad(probs, target_onehot) / batch
        for layer in reversed(self.layers[:-1]):
            grad = layer.backward(grad)
        return loss, probs

    def describe(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [{"kind": spec.kind, "hyper": spec.hyper} for spec in self.specs],
        }

    def _require_built(self):
        if not self.built:
            raise RuntimeError("network is not built; call build(seed) first")


def _conv_block(filters, padding):
    return [
        LayerSpec("conv2d", {"filters": filters, "kernel_size": 3, "padding": padding}),
        LayerSpec("relu"),
    ]


def feedforward_specs(hidden1: int = 1024, hidden2: int = 512) -> list[LayerSpec]:
    return [
        LayerSpec("flatten"),
        LayerSpec("dense", {"units": hidden1}),
        LayerSpec("relu"),
        LayerSpec("dropout", {"rate": 0.2}),
        LayerSpec("dense", {"units": hidden2}),
        LayerSpec("relu"),
        LayerSpec("dropout", {"rate": 0.2}),
        LayerSpec("dense", {"units": NUM_CLASSES, "init": "glorot"}),
        LayerSpec("softmax"),
    ]


def simple_cnn_specs(dense_units: int = 128, padding: int = 0) -> list[LayerSpec]:
    return (
        _conv_block(32, padding)
        + _conv_block(64, padding)
        + [
            LayerSpec("maxpool2d"),
            LayerSpec("dropout", {"rate": 0.25}),
            LayerSpec("flatten"),
            LayerSpec("dense", {"units": dense_units}),
            LayerSpec("relu"),
            LayerSpec("dropout", {"rate": 0.5}),
            LayerSpec("dense", {"units": NUM_CLASSES, "init": "glorot"}),
            LayerSpec("softmax"),
        ]
    )


def proposed_cnn_specs(dense_units: int = 512, padding: int = 0) -> list[LayerSpec]:
    return (
        _conv_block(64, padding)
        + _conv_block(64, padding)
        + [LayerSpec("maxpool2d"), LayerSpec("dropout", {"rate": 0.25})]
        + _conv_block(128, padding)
        + _conv_block(128, padding)
        + _conv_block(256, padding)
        + _conv_block(256, padding)
        + [
            LayerSpec("maxpool2d"),
            LayerSpec("dropout", {"rate": 0.25}),
            LayerSpec("flatten"),
            LayerSpec("dense", {"units": dense_units, "l2_penalty": 0.001}),
            LayerSpec("relu"),
            LayerSpec("dropout", {"rate": 0.5}),
            LayerSpec("dense", {"units": NUM_CLASSES, "init": "glorot"}),
            LayerSpec("softmax"),
        ]
    )


def build_feedforward(hidden1: int = 1024, hidden2: int = 512, seed: int = 0) -> Network:
    """Flatten -> two ReLU dense blocks with dropout 0.2 -> 7-way softmax."""
    return Network(feedforward_specs(hidden1, hidden2)).build(seed)


def build_simple_cnn(dense_units: int = 128, padding: int = 0, seed: int = 0) -> Network:
    """Two conv layers, one pool, then a single hidden dense layer."""
    return Network(simple_cnn_specs(dense_units, padding)).build(seed)


def build_proposed_cnn(dense_units: int = 512, padding: int = 0, seed: int = 0) -> Network:
    """Six conv layers (64/64/128/128/256/256), two pools, L2-regularized dense head."""
    return Network(proposed_cnn_specs(dense_units, padding)).build(seed)


BUILDERS = {
    "ffnn": build_feedforward,
    "simple_cnn": build_simple_cnn,
    "proposed_cnn": build_proposed_cnn,
}

ARCHITECTURE_SPECS = {
    "ffnn": feedforward_specs,
    "simple_cnn": simple_cnn_specs,
    "proposed_cnn": proposed_cnn_specs,
}


def save_model(net: Network, path: str):
    arch = json.dumps(net.describe()).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(arch)))
        fh.write(arch)
        params = net.parameters()
        fh.write(struct.pack("<I", len(params)))
        for p in params:
            fh.write(struct.pack("<I", p.ndim))
            fh.write(struct.pack(f"<{p.ndim}I", *p.shape))
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedFileError(
            f"file truncated while reading {what} at byte {fh.tell() - len(buf)}"
        )
    return buf


def load_model(path: str) -> Network:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != MAGIC:
            raise BadMagicError(f"bad magic {magic!r} at byte 0, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != FORMAT_VERSION:
            raise VersionMismatchError(f"format version {version}, expected {FORMAT_VERSION}")
        (arch_len,) = struct.unpack("<I", _read_exact(fh, 4, "arch length"))
        try:
            arch = json.loads(_read_exact(fh, arch_len, "arch descriptor"))
        except json.JSONDecodeError as exc:
            raise ModelFileError(f"unreadable arch descriptor: {exc}") from exc

        specs = [LayerSpec(d["kind"], d.get("hyper", {})) for d in arch["layers"]]
        net = Network(specs, tuple(arch["input_shape"]), arch["num_classes"]).build(seed=0)

        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        params = net.parameters()
        if count != len(params):
            raise ModelFileError(f"file has {count} tensors, arch needs {len(params)}")
        for i, target in enumerate(params):
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, f"tensor {i} rank"))
            if rank == 0 or rank > 8:
                raise DimOverflowError(f"tensor {i} has implausible rank {rank}")
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, f"tensor {i} dims"))
            if any(d == 0 or d >= _MAX_DIM for d in dims):
                raise DimOverflowError(f"tensor {i} has out-of-range dims {dims}")
            n = 1
            for d in dims:
                n *= d
                if n > _MAX_ELEMENTS:
                    raise DimOverflowError(f"tensor {i} element count overflows: dims {dims}")
            if tuple(dims) != target.shape:
                raise ModelFileError(
                    f"tensor {i} shape {dims} does not match architecture {target.shape}"
                )
            payload = _read_exact(fh, 4 * n, f"tensor {i} payload")
            target[...] = np.frombuffer(payload, dtype="<f4").reshape(dims)
        trailing = fh.read(1)
        if trailing:
            raise ModelFileError(f"trailing bytes after last tensor at byte {fh.tell() - 1}")
    return net
