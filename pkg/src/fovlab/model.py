"""The desk-scale CNN: architecture spec, forward/backward, training, persistence.

A Network is immutable once built (weights are plain arrays; nothing mutates
them outside train()), so one loaded model can be shared across concurrent
attack or inference workers. All forward math is float32.
"""

import io
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import ops
from .data import PRE_SOFTMAX, POST_SOFTMAX, ClassScores, LabeledImage, softmax


# ---------------------------------------------------------------------------
# Architecture description


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | relu | maxpool2 | dense
    filters: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    units: int = 0


def conv_spec(filters, kernel, stride=1, pad=1):
    return LayerSpec("conv", filters=filters, kernel=kernel, stride=stride, pad=pad)


def relu_spec():
    return LayerSpec("relu")


def maxpool_spec():
    return LayerSpec("maxpool2")


def dense_spec(units):
    return LayerSpec("dense", units=units)


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple  # (C, H, W)
    layers: tuple
    num_classes: int
    input_scale: float = 1.0 / 255.0

    def to_json(self) -> str:
        layers = []
        for l in self.layers:
            if l.kind == "conv":
                layers.append({"kind": "conv", "filters": l.filters, "kernel": l.kernel,
                               "stride": l.stride, "pad": l.pad})
            elif l.kind == "dense":
                layers.append({"kind": "dense", "units": l.units})
            else:
                layers.append({"kind": l.kind})
        return json.dumps({"input_shape": list(self.input_shape), "layers": layers,
                           "num_classes": self.num_classes, "input_scale": self.input_scale})

    @staticmethod
    def from_json(text: str) -> "ModelSpec":
        d = json.loads(text)
        layers = []
        for l in d["layers"]:
            kind = l["kind"]
            if kind == "conv":
                layers.append(conv_spec(l["filters"], l["kernel"], l["stride"], l["pad"]))
            elif kind == "dense":
                layers.append(dense_spec(l["units"]))
            elif kind in ("relu", "maxpool2"):
                layers.append(LayerSpec(kind))
            else:
                raise ValueError(f"unknown layer kind {kind!r}")
        return ModelSpec(tuple(d["input_shape"]), tuple(layers), d["num_classes"],
                         d.get("input_scale", 1.0))


def desk_model_spec(num_classes: int = 10, input_hw: int = 32) -> ModelSpec:
    """Default small architecture: two conv/pool stages and a 128-unit head."""
    return ModelSpec(
        input_shape=(3, input_hw, input_hw),
        layers=(conv_spec(16, 3), relu_spec(), maxpool_spec(),
                conv_spec(32, 3), relu_spec(), maxpool_spec(),
                dense_spec(128), relu_spec(), dense_spec(num_classes)),
        num_classes=num_classes,
    )


# ---------------------------------------------------------------------------
# Layers

class ConvLayer:
    def __init__(self, kernels, bias, stride, pad):
        self.kernels = kernels
        self.bias = bias
        self.stride = stride
        self.pad = pad

    def forward(self, x):
        return ops.conv2d(x, self.kernels, self.bias, self.stride, self.pad)

    def backward(self, x, grad_out, want_params):
        gx = ops.conv2d_input_grad(grad_out, self.kernels, x.shape, self.stride, self.pad)
        if not want_params:
            return gx, None
        dk, db = ops.conv2d_weight_grad(grad_out, x, self.kernels.shape, self.stride, self.pad)
        return gx, [dk, db]

    def params(self):
        return [self.kernels, self.bias]


class ReluLayer:
    def forward(self, x):
        return ops.relu(x)

    def backward(self, x, grad_out, want_params):
        return ops.relu_grad(grad_out, x), None

    def params(self):
        return []


class MaxPoolLayer:
    def forward(self, x):
        return ops.maxpool2(x)

    def backward(self, x, grad_out, want_params):
        return ops.maxpool2_grad(grad_out, x), None

    def params(self):
        return []


class DenseLayer:
    """Dense layer; flattens non-vector inputs row-major."""

    def __init__(self, weights, bias):
        self.weights = weights
        self.bias = bias

    def forward(self, x):
        return ops.dense(x.reshape(-1), self.weights, self.bias)

    def backward(self, x, grad_out, want_params):
        gx, gw, gb = ops.dense_grads(grad_out, x.reshape(-1), self.weights)
        if not want_params:
            return gx.reshape(x.shape), None
        return gx.reshape(x.shape), [gw, gb]

    def params(self):
        return [self.weights, self.bias]


@dataclass
class ForwardTrace:
    """Per-layer input/output activations, in execution order.

    inputs[0] is the scaled network input; replaying layer.forward on each
    stored input reproduces the stored outputs bit-identically.
    """
    inputs: list
    outputs: list


class Network:
    def __init__(self, spec: ModelSpec, layers):
        self.spec = spec
        self.layers = layers

    @property
    def num_classes(self):
        return self.spec.num_classes

    @property
    def input_shape(self):
        return self.spec.input_shape

    # -- forward / backward ------------------------------------------------

    def _check_input(self, image):
        if tuple(image.shape) != tuple(self.spec.input_shape):
            raise ValueError(f"input shape {image.shape} does not match "
                             f"model input {self.spec.input_shape}")

    def forward(self, image: np.ndarray) -> np.ndarray:
        self._check_input(image)
        x = image * np.asarray(self.spec.input_scale, dtype=image.dtype)
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def forward_trace(self, image: np.ndarray):
        self._check_input(image)
        x = image * np.asarray(self.spec.input_scale, dtype=image.dtype)
        inputs, outputs = [], []
        for layer in self.layers:
            inputs.append(x)
            x = layer.forward(x)
            outputs.append(x)
        return x, ForwardTrace(inputs, outputs)

    def backprop(self, trace: ForwardTrace, upstream: np.ndarray, want_params=False):
        """Reverse pass; returns (d objective / d image, per-layer param grads)."""
        if len(trace.inputs) != len(self.layers):
            raise ValueError(f"trace has {len(trace.inputs)} layers, "
                             f"model has {len(self.layers)}")
        if upstream.shape != trace.outputs[-1].shape:
            raise ValueError(f"upstream shape {upstream.shape} does not match "
                             f"final output {trace.outputs[-1].shape}")
        grad = upstream
        param_grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            grad, pg = self.layers[i].backward(trace.inputs[i], grad, want_params)
            param_grads[i] = pg
        input_grad = grad * np.asarray(self.spec.input_scale, dtype=grad.dtype)
        return input_grad, param_grads

    # -- protocol used by attacks and analyses -----------------------------

    def scores(self, image: np.ndarray) -> np.ndarray:
        return self.forward(image)

    def scores_with_cache(self, image: np.ndarray):
        scores, trace = self.forward_trace(image)
        return scores, trace

    def class_grad(self, cache: ForwardTrace, class_index: int) -> np.ndarray:
        upstream = np.zeros_like(cache.outputs[-1])
        upstream[class_index] = 1.0
        grad, _ = self.backprop(cache, upstream)
        return grad

    # -- parameters ---------------------------------------------------------

    def parameters(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def set_parameters(self, tensors):
        tensors = list(tensors)
        i = 0
        for layer in self.layers:
            n = len(layer.params())
            if n == 0:
                continue
            if isinstance(layer, ConvLayer):
                layer.kernels, layer.bias = tensors[i], tensors[i + 1]
            else:
                layer.weights, layer.bias = tensors[i], tensors[i + 1]
            i += n
        if i != len(tensors):
            raise ValueError(f"expected {i} parameter tensors, got {len(tensors)}")


def _layer_output_shape(shape, spec: LayerSpec):
    if spec.kind == "conv":
        c, h, w = shape
        oh = (h + 2 * spec.pad - spec.kernel) // spec.stride + 1
        ow = (w + 2 * spec.pad - spec.kernel) // spec.stride + 1
        return (spec.filters, oh, ow)
    if spec.kind == "maxpool2":
        c, h, w = shape
        return (c, h // 2, w // 2)
    if spec.kind == "dense":
        return (spec.units,)
    return shape


def build_network(spec: ModelSpec, seed: int = 0) -> Network:
    """Instantiate a network with He-initialized weights (deterministic per seed)."""
    rng = np.random.default_rng(seed)
    layers = []
    shape = tuple(spec.input_shape)
    for ls in spec.layers:
        if ls.kind == "conv":
            c = shape[0]
            fan_in = c * ls.kernel * ls.kernel
            k = (rng.standard_normal((ls.filters, c, ls.kernel, ls.kernel))
                 * np.sqrt(2.0 / fan_in)).astype(np.float32)
            layers.append(ConvLayer(k, np.zeros(ls.filters, dtype=np.float32),
                                    ls.stride, ls.pad))
        elif ls.kind == "relu":
            layers.append(ReluLayer())
        elif ls.kind == "maxpool2":
            layers.append(MaxPoolLayer())
        elif ls.kind == "dense":
            n = int(np.prod(shape))
            w = (rng.standard_normal((ls.units, n)) * np.sqrt(2.0 / n)).astype(np.float32)
            layers.append(DenseLayer(w, np.zeros(ls.units, dtype=np.float32)))
        else:
            raise ValueError(f"unknown layer kind {ls.kind!r}")
        shape = _layer_output_shape(shape, ls)
    if shape != (spec.num_classes,):
        raise ValueError(f"layers produce output shape {shape}, "
                         f"expected ({spec.num_classes},)")
    return Network(spec, layers)


# ---------------------------------------------------------------------------
# Prediction and the error criterion


def predict_scores(model: Network, image: np.ndarray, stage: str = PRE_SOFTMAX) -> ClassScores:
    raw = model.forward(image)
    if stage == PRE_SOFTMAX:
        return ClassScores(raw, PRE_SOFTMAX)
    if stage == POST_SOFTMAX:
        return ClassScores(softmax(raw), POST_SOFTMAX)
    raise ValueError(f"unknown stage {stage!r}")


def top_k_error(scores, label: int, k_top: int = 1) -> int:
    """0 iff label ranks among the k_top highest scores (ties -> lower index wins)."""
    vec = scores.scores if isinstance(scores, ClassScores) else scores
    if not 1 <= k_top <= len(vec):
        raise ValueError(f"k_top {k_top} out of range for {len(vec)} classes")
    order = np.lexsort((np.arange(len(vec)), -vec))
    return 0 if label in order[:k_top] else 1


def accuracy(model: Network, images, k_top: int = 1) -> float:
    if not images:
        return 0.0
    errs = [top_k_error(model.forward(im.image), im.label, k_top) for im in images]
    return 1.0 - float(np.mean(errs))


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    lr: float = 0.02
    momentum: float = 0.9
    batch: int = 32
    seed: int = 0
    augment: bool = True


class TrainingDiverged(RuntimeError):
    pass


def _augment(img: LabeledImage, rng, input_hw) -> np.ndarray:
    """Flip / crop-resize augmentation; the desk stand-in for the scale and
    translation robustness large-scale training normally provides."""
    from . import foveation  # local import; foveation depends on data only

    x = img.image
    c, h, w = x.shape
    roll = rng.random()
    if roll < 0.35:
        return x
    if roll < 0.55:
        return x[:, :, ::-1].copy()
    if roll < 0.8 or not img.bboxes:
        # random large window
        fh = rng.uniform(0.5, 1.0)
        fw = rng.uniform(0.5, 1.0)
        ch, cw = max(2, round(h * fh)), max(2, round(w * fw))
        y0 = rng.integers(0, h - ch + 1)
        x0 = rng.integers(0, w - cw + 1)
        box = foveation.BoundingBox(int(x0), int(y0), int(cw), int(ch))
    else:
        # window containing the object box, inflated by a random margin
        b = img.bbox
        x0 = rng.integers(0, b.x0 + 1)
        y0 = rng.integers(0, b.y0 + 1)
        x1 = rng.integers(b.x0 + b.w, w + 1)
        y1 = rng.integers(b.y0 + b.h, h + 1)
        box = foveation.BoundingBox(int(x0), int(y0), int(x1 - x0), int(y1 - y0))
    out = foveation.crop_resize(x, box, (input_hw[0], input_hw[1]))
    if rng.random() < 0.5:
        out = out[:, :, ::-1].copy()
    return out


def _cross_entropy_grad(scores: np.ndarray, label: int):
    p = softmax(scores.astype(np.float64))
    loss = -np.log(max(p[label], 1e-12))
    grad = p.astype(np.float32)
    grad[label] -= 1.0
    return loss, grad


def train(spec: ModelSpec, train_images, val_images, config: TrainConfig,
          accuracy_target: float | None = None, max_attempts: int = 3) -> "Checkpoint":
    """SGD with momentum on cross-entropy; deterministic given the seed.

    With accuracy_target set, reruns with a fresh seed (up to max_attempts)
    until held-out top-1 reaches the target; raises if it never does.
    """
    if not train_images:
        raise ValueError("empty training set")
    for im in train_images:
        if not 0 <= im.label < spec.num_classes:
            raise ValueError(f"label {im.label} out of range for {spec.num_classes} classes")
    attempts = max_attempts if accuracy_target is not None else 1
    last_acc = 0.0
    for attempt in range(attempts):
        seed = config.seed + 7919 * attempt
        net = _train_once(spec, train_images, replace(config, seed=seed))
        val_acc = accuracy(net, val_images) if val_images else float("nan")
        meta = {"epochs": config.epochs, "seed": seed, "final_accuracy": val_acc,
                "lr": config.lr, "momentum": config.momentum, "batch": config.batch,
                "augment": config.augment, "train_size": len(train_images),
                "val_size": len(val_images or [])}
        ckpt = Checkpoint(net, meta)
        if accuracy_target is None or val_acc >= accuracy_target:
            return ckpt
        last_acc = val_acc
    raise TrainingDiverged(
        f"held-out accuracy {last_acc:.3f} below target {accuracy_target} "
        f"after {attempts} attempts")


def _train_once(spec: ModelSpec, images, config: TrainConfig) -> Network:
    net = build_network(spec, seed=config.seed)
    params = net.parameters()
    velocity = [np.zeros_like(p) for p in params]
    rng = np.random.default_rng(config.seed + 1)
    input_hw = spec.input_shape[1:]
    n = len(images)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch):
            idx = order[start:start + config.batch]
            grads = [np.zeros_like(p) for p in params]
            batch_loss = 0.0
            for i in idx:
                img = images[i]
                x = _augment(img, rng, input_hw) if config.augment else img.image
                scores, trace = net.forward_trace(x)
                loss, up = _cross_entropy_grad(scores, img.label)
                batch_loss += loss
                _, pgs = net.backprop(trace, up, want_params=True)
                j = 0
                for pg in pgs:
                    if pg is None:
                        continue
                    for g in pg:
                        grads[j] += g
                        j += 1
            if not np.isfinite(batch_loss):
                raise TrainingDiverged(
                    f"loss became non-finite at epoch {epoch}, batch start {start}")
            scale = np.float32(config.lr / len(idx))
            mu = np.float32(config.momentum)
            for p, v, g in zip(params, velocity, grads):
                v *= mu
                v -= scale * g
                p += v
    return net


# ---------------------------------------------------------------------------
# Checkpoints

CKPT_MAGIC = b"FOVN"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    network: Network
    metadata: dict = field(default_factory=dict)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    from .tensorfile import tensor_bytes

    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    spec_bytes = ckpt.network.spec.to_json().encode("utf-8")
    buf.write(struct.pack("<I", len(spec_bytes)))
    buf.write(spec_bytes)
    for p in ckpt.network.parameters():
        buf.write(tensor_bytes(p))
    meta_bytes = json.dumps(ckpt.metadata, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(meta_bytes)))
    buf.write(meta_bytes)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    from .tensorfile import TensorFileError, read_tensor_from

    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad magic at offset 0: {buf[:4]!r}")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported version {version} at offset 4")
    pos = 8
    if len(buf) < pos + 4:
        raise CheckpointError(f"truncated spec length at offset {pos}")
    (spec_len,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if len(buf) < pos + spec_len:
        raise CheckpointError(f"truncated spec at offset {pos}")
    spec = ModelSpec.from_json(buf[pos:pos + spec_len].decode("utf-8"))
    pos += spec_len
    net = build_network(spec, seed=0)
    expected = net.parameters()
    tensors = []
    for ref in expected:
        try:
            t, pos = read_tensor_from(buf, pos)
        except TensorFileError as e:
            raise CheckpointError(f"weight tensor: {e}") from e
        if t.shape != ref.shape:
            raise CheckpointError(f"weight shape {t.shape} does not match "
                                  f"spec shape {ref.shape}")
        tensors.append(t)
    net.set_parameters(tensors)
    if len(buf) < pos + 4:
        raise CheckpointError(f"truncated metadata length at offset {pos}")
    (meta_len,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if len(buf) < pos + meta_len:
        raise CheckpointError(f"truncated metadata at offset {pos}")
    metadata = json.loads(buf[pos:pos + meta_len].decode("utf-8"))
    return Checkpoint(net, metadata)
