"""Architecture descriptors and the forward/backward entry points.

An architecture is a :class:`Sequential` list of layer specs.  Specs carry
explicit input/output sizes so that a wiring mistake is reported at
construction time, naming both offending layers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fedsab.engine import ParamSet, Tape, Tensor, as_tensor, glorot_uniform
from fedsab.errors import ConfigError


@dataclass(frozen=True)
class Conv:
    name: str
    in_channels: int
    out_channels: int
    kernel: int = 3


@dataclass(frozen=True)
class Dense:
    name: str
    in_features: int
    out_features: int


@dataclass(frozen=True)
class ReLU:
    name: str = "relu"


@dataclass(frozen=True)
class Sigmoid:
    name: str = "sigmoid"


@dataclass(frozen=True)
class MaxPool:
    name: str = "maxpool"


@dataclass(frozen=True)
class Upsample:
    name: str = "upsample"


@dataclass(frozen=True)
class GlobalAvgPool:
    name: str = "gap"


Layer = Conv | Dense | ReLU | Sigmoid | MaxPool | Upsample | GlobalAvgPool


class Sequential:
    """A feed-forward stack of layers over [B, C, H, W] inputs."""

    def __init__(self, layers: list[Layer], input_shape: tuple[int, int, int]):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.shapes = self._infer_shapes()

    def _infer_shapes(self) -> list[tuple[int, ...]]:
        shape: tuple[int, ...] = self.input_shape
        prev = "input"
        shapes = []
        for layer in self.layers:
            if isinstance(layer, Conv):
                if len(shape) != 3 or shape[0] != layer.in_channels:
                    raise ConfigError(
                        f"layer '{prev}' outputs {shape} but conv '{layer.name}' expects "
                        f"{layer.in_channels} input channels"
                    )
                shape = (layer.out_channels, shape[1], shape[2])
            elif isinstance(layer, Dense):
                feats = int(np.prod(shape))
                if feats != layer.in_features:
                    raise ConfigError(
                        f"layer '{prev}' outputs {shape} ({feats} features) but dense "
                        f"'{layer.name}' expects {layer.in_features}"
                    )
                shape = (layer.out_features,)
            elif isinstance(layer, MaxPool):
                if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
                    raise ConfigError(f"layer '{prev}' outputs {shape}; cannot max-pool in '{layer.name}'")
                shape = (shape[0], shape[1] // 2, shape[2] // 2)
            elif isinstance(layer, Upsample):
                shape = (shape[0], shape[1] * 2, shape[2] * 2)
            elif isinstance(layer, GlobalAvgPool):
                shape = (shape[0],)
            shapes.append(shape)
            prev = layer.name
        return shapes

    @property
    def output_dim(self) -> int:
        return int(np.prod(self.shapes[-1]))

    @property
    def last_conv_index(self) -> int | None:
        idx = [i for i, layer in enumerate(self.layers) if isinstance(layer, Conv)]
        return idx[-1] if idx else None

    def init(self, rng: np.random.Generator) -> ParamSet:
        """Glorot-uniform weights, zero biases."""
        params = ParamSet()
        for layer in self.layers:
            if isinstance(layer, Conv):
                k = layer.kernel
                params[f"{layer.name}.w"] = glorot_uniform(
                    rng,
                    (layer.out_channels, layer.in_channels, k, k),
                    layer.in_channels * k * k,
                    layer.out_channels * k * k,
                )
                params[f"{layer.name}.b"] = Tensor(np.zeros(layer.out_channels, np.float32))
            elif isinstance(layer, Dense):
                params[f"{layer.name}.w"] = glorot_uniform(
                    rng, (layer.in_features, layer.out_features), layer.in_features, layer.out_features
                )
                params[f"{layer.name}.b"] = Tensor(np.zeros(layer.out_features, np.float32))
        return params

    def forward(self, tape: Tape, params: ParamSet, x: Tensor) -> Tensor:
        if tuple(x.shape[1:]) != self.input_shape:
            raise ConfigError(f"input batch shape {x.shape[1:]} != architecture input {self.input_shape}")
        last_conv = self.last_conv_index
        h = x
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                h = tape.conv2d(h, params[f"{layer.name}.w"], params[f"{layer.name}.b"])
            elif isinstance(layer, Dense):
                h = tape.dense(h, params[f"{layer.name}.w"], params[f"{layer.name}.b"])
            elif isinstance(layer, ReLU):
                h = tape.relu(h)
            elif isinstance(layer, Sigmoid):
                h = tape.sigmoid(h)
            elif isinstance(layer, MaxPool):
                h = tape.maxpool2(h)
            elif isinstance(layer, Upsample):
                h = tape.upsample2(h)
            elif isinstance(layer, GlobalAvgPool):
                h = tape.global_avg_pool(h)
            # Grad-CAM taps the activation of the last conv block
            if last_conv is not None and i >= last_conv and "last_conv" not in tape.taps:
                nxt = self.layers[i + 1] if i + 1 < len(self.layers) else None
                if not isinstance(nxt, (ReLU, Sigmoid)):
                    tape.taps["last_conv"] = h
        if h.data.ndim != 2:
            h = tape.reshape(h, (h.shape[0], -1))
        return h


def small_cnn(input_shape: tuple[int, int, int], num_classes: int) -> Sequential:
    """conv3x3(8)-ReLU-pool-conv3x3(16)-ReLU-pool-dense(K)."""
    c, h, w = input_shape
    return Sequential(
        [
            Conv("conv1", c, 8),
            ReLU("relu1"),
            MaxPool("pool1"),
            Conv("conv2", 8, 16),
            ReLU("relu2"),
            MaxPool("pool2"),
            Dense("fc", 16 * (h // 4) * (w // 4), num_classes),
        ],
        input_shape,
    )


def wide_cnn(input_shape: tuple[int, int, int], num_classes: int) -> Sequential:
    c, h, w = input_shape
    return Sequential(
        [
            Conv("conv1", c, 16),
            ReLU("relu1"),
            MaxPool("pool1"),
            Conv("conv2", 16, 32),
            ReLU("relu2"),
            MaxPool("pool2"),
            Dense("fc1", 32 * (h // 4) * (w // 4), 64),
            ReLU("relu3"),
            Dense("fc2", 64, num_classes),
        ],
        input_shape,
    )


ARCHITECTURES = {"small-cnn": small_cnn, "wide-cnn": wide_cnn}


def build_model(name: str, input_shape: tuple[int, int, int], num_classes: int) -> Sequential:
    try:
        factory = ARCHITECTURES[name]
    except KeyError:
        raise ConfigError(f"unknown model '{name}'; known: {sorted(ARCHITECTURES)}") from None
    return factory(tuple(input_shape), num_classes)


def forward_pass(arch: Sequential, params: ParamSet, batch, record: bool = True) -> tuple[Tensor, Tape]:
    tape = Tape(record=record)
    tape.params = params
    logits = arch.forward(tape, params, as_tensor(batch))
    tape.output = logits
    return logits, tape


def backward_pass(tape: Tape, loss_grad) -> ParamSet:
    """Gradients of every parameter used in the forward pass that built ``tape``."""
    if tape.output is None or tape.params is None:
        raise ConfigError("tape was not produced by forward_pass")
    tape.backward(tape.output, loss_grad)
    return tape.grads_for(tape.params)


def predict(arch: Sequential, params: ParamSet, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Logits for ``images`` without recording a tape."""
    out = []
    for i in range(0, len(images), batch_size):
        logits, _ = forward_pass(arch, params, images[i : i + batch_size], record=False)
        out.append(logits.data)
    return np.concatenate(out) if out else np.zeros((0, arch.output_dim), np.float32)


def loss_and_grads(arch: Sequential, params: ParamSet, images, labels) -> tuple[float, ParamSet]:
    from fedsab.engine import cross_entropy_loss

    logits, tape = forward_pass(arch, params, images)
    loss, g = cross_entropy_loss(logits, labels)
    return loss, backward_pass(tape, g)


def finite_difference_oracle(
    arch: Sequential, params: ParamSet, batch, labels, eps: float = 1e-3, loss_fn=None
) -> ParamSet:
    """Central-difference gradient of the batch loss, one coordinate at a time.

    Runs in float64 regardless of the dtype of ``params``.  ``loss_fn`` maps
    logits to a scalar; it defaults to mean cross-entropy against ``labels``.
    """
    if eps <= 0:
        raise ConfigError(f"eps must be > 0, got {eps}")
    from fedsab.engine import cross_entropy_loss

    if loss_fn is None:

        def loss_fn(z):
            return cross_entropy_loss(z, labels)[0]

    p64 = params.astype(np.float64)
    x64 = np.asarray(batch.data if isinstance(batch, Tensor) else batch, dtype=np.float64)

    def f() -> float:
        z, _ = forward_pass(arch, p64, x64, record=False)
        return float(loss_fn(z.data))

    out = ParamSet()
    for name, t in p64.items():
        flat = t.data.reshape(-1)
        g = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f()
            flat[i] = orig - eps
            down = f()
            flat[i] = orig
            g[i] = (up - down) / (2 * eps)
        out[name] = Tensor(g.reshape(t.shape))
    return out


class Classifier:
    """An architecture bound to parameters; calling it returns logits."""

    def __init__(self, arch: Sequential, params: ParamSet):
        self.arch = arch
        self.params = params

    def predict(self, images: np.ndarray) -> np.ndarray:
        return predict(self.arch, self.params, np.asarray(images, dtype=np.float32))

    __call__ = predict
