"""A small numpy convolutional network with softmax output and SGD training.

Tensors are NCHW float64.  Class index 0 is MALE (+1) and index 1 is FEMALE (-1).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imagecore import FEMALE, MALE, ImageBuffer

LAYER_KINDS = ("conv", "fc", "relu", "maxpool", "softmax")
MAGIC = b"AFNN"
FORMAT_VERSION = 1


class NetworkFormatError(ValueError):
    """Corrupt or unreadable network file."""


class NetworkVersionError(NetworkFormatError):
    """Network file with an unknown magic or format version."""


class TrainingDivergedError(FloatingPointError):
    def __init__(self, iteration: int, loss: float):
        self.iteration = iteration
        self.loss = loss
        super().__init__(f"training diverged at iteration {iteration} (loss {loss})")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int = 0  # conv output channels
    kernel: int = 0  # conv / maxpool window
    stride: int = 1
    width: int = 0  # fc output width

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv", "maxpool"):
            if self.kernel < 1 or self.stride < 1:
                raise ValueError(f"{self.kind} needs kernel and stride >= 1")
        if self.kind == "conv" and self.filters < 1:
            raise ValueError("conv needs filters >= 1")
        if self.kind == "fc" and self.width < 1:
            raise ValueError("fc needs width >= 1")


def conv(filters: int, kernel: int, stride: int = 1) -> LayerSpec:
    return LayerSpec("conv", filters=filters, kernel=kernel, stride=stride)


def fc(width: int) -> LayerSpec:
    return LayerSpec("fc", width=width)


def maxpool(kernel: int, stride: int) -> LayerSpec:
    return LayerSpec("maxpool", kernel=kernel, stride=stride)


RELU = LayerSpec("relu")
SOFTMAX = LayerSpec("softmax")


@dataclass(frozen=True)
class NetworkSpec:
    input_size: int
    channels: int
    layers: tuple[LayerSpec, ...]
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.input_size < 1 or self.channels < 1:
            raise ValueError("input size and channels must be positive")
        if not self.layers or self.layers[-1].kind != "softmax":
            raise ValueError("network must end in a softmax layer")
        if any(l.kind == "softmax" for l in self.layers[:-1]):
            raise ValueError("softmax is only allowed as the final layer")
        shapes = self.shapes()
        if shapes[-1] != (2,):
            raise ValueError(f"final output must be 2-way, got shape {shapes[-1]}")

    def shapes(self) -> list[tuple[int, ...]]:
        """Activation shape after each layer, starting with the input ``(C, H, W)``."""
        shape: tuple[int, ...] = (self.channels, self.input_size, self.input_size)
        out = [shape]
        for i, layer in enumerate(self.layers):
            if layer.kind in ("conv", "maxpool"):
                if len(shape) != 3:
                    raise ValueError(f"layer {i} ({layer.kind}) needs a spatial input, got {shape}")
                c, h, w = shape
                if layer.kernel > h or layer.kernel > w:
                    raise ValueError(f"layer {i} kernel {layer.kernel} exceeds input {h}x{w}")
                ho = (h - layer.kernel) // layer.stride + 1
                wo = (w - layer.kernel) // layer.stride + 1
                shape = (layer.filters if layer.kind == "conv" else c, ho, wo)
            elif layer.kind == "fc":
                shape = (layer.width,)
            out.append(shape)
        return out

    def param_shapes(self) -> list[tuple[int, ...]]:
        """Weight and bias shapes in declaration order."""
        shapes = self.shapes()
        params = []
        for layer, in_shape in zip(self.layers, shapes[:-1]):
            if layer.kind == "conv":
                params += [(layer.filters, in_shape[0], layer.kernel, layer.kernel), (layer.filters,)]
            elif layer.kind == "fc":
                params += [(layer.width, int(np.prod(in_shape))), (layer.width,)]
        return params

    def n_params(self) -> int:
        return int(sum(np.prod(s) for s in self.param_shapes()))

    def to_json(self) -> str:
        return json.dumps({
            "name": self.name,
            "input_size": self.input_size,
            "channels": self.channels,
            "layers": [asdict(l) for l in self.layers],
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        d = json.loads(text)
        return cls(d["input_size"], d["channels"], tuple(LayerSpec(**l) for l in d["layers"]),
                   d.get("name", "custom"))


def paper_spec() -> NetworkSpec:
    """Five conv and three fc layers with the filter counts exactly as published."""
    return NetworkSpec(227, 3, (
        conv(96, 11, 4), RELU,
        conv(256, 5, 1), RELU,
        conv(9, 3, 1), RELU,
        conv(9, 3, 1), RELU,
        conv(9, 3, 1), RELU,
        fc(4096), RELU,
        fc(4096), RELU,
        fc(2), SOFTMAX,
    ), name="afif4-paper")


def paper_wide_spec() -> NetworkSpec:
    # Alternate reading of the last three conv widths (384/384/256) with max-pooling.
    return NetworkSpec(227, 3, (
        conv(96, 11, 4), RELU, maxpool(3, 2),
        conv(256, 5, 1), RELU, maxpool(3, 2),
        conv(384, 3, 1), RELU,
        conv(384, 3, 1), RELU,
        conv(256, 3, 1), RELU, maxpool(3, 2),
        fc(4096), RELU,
        fc(4096), RELU,
        fc(2), SOFTMAX,
    ), name="afif4-paper-wide")


def tiny_spec(input_size: int = 32, channels: int = 3) -> NetworkSpec:
    return NetworkSpec(input_size, channels, (
        conv(8, 5, 2), RELU,
        conv(16, 3, 1), RELU,
        fc(32), RELU,
        fc(2), SOFTMAX,
    ), name="afif4-tiny")


PRESETS = {
    "afif4-paper": paper_spec,
    "afif4-paper-wide": paper_wide_spec,
    "afif4-tiny": tiny_spec,
}


def preset(name: str) -> NetworkSpec:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.02
    iterations: int = 1000
    batch_size: int = 16
    seed: int = 0
    init_scale: float = 1.0
    momentum: float = 0.9

    def __post_init__(self):
        if self.learning_rate < 0 or self.iterations < 0 or self.batch_size < 1:
            raise ValueError("learning rate and iterations must be >= 0, batch size >= 1")
        if not self.init_scale > 0:
            raise ValueError("init_scale must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")


@dataclass(eq=False)
class NetworkState:
    spec: NetworkSpec
    params: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        expected = self.spec.param_shapes()
        if [p.shape for p in self.params] != expected:
            raise ValueError(f"parameter shapes {[p.shape for p in self.params]} do not match spec")
        if not all(np.all(np.isfinite(p)) for p in self.params):
            raise ValueError("network parameters must be finite")

    def copy(self) -> "NetworkState":
        return NetworkState(self.spec, [p.copy() for p in self.params])

    def equals(self, other: "NetworkState") -> bool:
        return (self.spec == other.spec and len(self.params) == len(other.params)
                and all(np.array_equal(a, b) for a, b in zip(self.params, other.params)))


def init_network(spec: NetworkSpec, seed: int = 0, init_scale: float = 1.0) -> NetworkState:
    """Gaussian weights with std ``init_scale * sqrt(2 / fan_in)``; zero biases."""
    rng = np.random.default_rng(seed)
    params = []
    for shape in spec.param_shapes():
        if len(shape) == 1:
            params.append(np.zeros(shape))
        else:
            fan_in = int(np.prod(shape[1:]))
            params.append(rng.normal(0.0, init_scale * np.sqrt(2.0 / fan_in), size=shape))
    return NetworkState(spec, params)


def zero_network(spec: NetworkSpec) -> NetworkState:
    return NetworkState(spec, [np.zeros(s) for s in spec.param_shapes()])


# --------------------------------------------------------------------------
# layer math


def _windows(x: np.ndarray, k: int, s: int) -> np.ndarray:
    # (N, C, Ho, Wo, k, k) strided view
    return sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]


def _conv_forward(x, W, b, s):
    k = W.shape[2]
    win = _windows(x, k, s)
    out = np.tensordot(win, W, axes=([1, 4, 5], [1, 2, 3]))  # N, Ho, Wo, F
    out += b
    return out.transpose(0, 3, 1, 2), win


def _conv_backward(dout, x_shape, win, W, s):
    k = W.shape[2]
    dW = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))
    db = dout.sum(axis=(0, 2, 3))
    dcols = np.tensordot(dout, W, axes=([1], [0]))  # N, Ho, Wo, C, k, k
    dx = np.zeros(x_shape)
    ho, wo = dout.shape[2], dout.shape[3]
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dx, dW, db


def _pool_forward(x, k, s):
    win = _windows(x, k, s)
    n, c, ho, wo = win.shape[:4]
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    return np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0], arg


def _pool_backward(dout, x_shape, arg, k, s):
    dx = np.zeros(x_shape)
    ho, wo = dout.shape[2], dout.shape[3]
    for i in range(k):
        for j in range(k):
            hit = arg == i * k + j
            dx[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += dout * hit
    return dx


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward(state: NetworkState, x: np.ndarray, keep: bool = False):
    caches = []
    params = iter(state.params)
    for layer in state.spec.layers:
        if layer.kind == "conv":
            W, b = next(params), next(params)
            x_in = x
            x, win = _conv_forward(x, W, b, layer.stride)
            caches.append((x_in.shape, win) if keep else None)
        elif layer.kind == "fc":
            W, b = next(params), next(params)
            x_in = x.reshape(x.shape[0], -1)
            caches.append((x.shape, x_in) if keep else None)
            x = x_in @ W.T + b
        elif layer.kind == "relu":
            caches.append(x > 0 if keep else None)
            x = np.maximum(x, 0.0)
        elif layer.kind == "maxpool":
            shape = x.shape
            x, arg = _pool_forward(x, layer.kernel, layer.stride)
            caches.append((shape, arg) if keep else None)
        else:
            x = _softmax(x)
            caches.append(None)
    return x, caches


def _backward(state: NetworkState, caches, probs: np.ndarray, targets: np.ndarray):
    """Gradients of the mean cross-entropy, in parameter order."""
    n = probs.shape[0]
    d = probs.copy()
    d[np.arange(n), targets] -= 1.0
    d /= n
    grads: list[np.ndarray] = []
    p_idx = len(state.params)
    for layer, cache in zip(reversed(state.spec.layers[:-1]), reversed(caches[:-1])):
        if layer.kind == "fc":
            p_idx -= 2
            W = state.params[p_idx]
            x_shape, x_in = cache
            grads[:0] = [d.T @ x_in, d.sum(axis=0)]
            d = (d @ W).reshape(x_shape)
        elif layer.kind == "conv":
            p_idx -= 2
            W = state.params[p_idx]
            x_shape, win = cache
            d, dW, db = _conv_backward(d, x_shape, win, W, layer.stride)
            grads[:0] = [dW, db]
        elif layer.kind == "relu":
            d = d * cache
        elif layer.kind == "maxpool":
            shape, arg = cache
            d = _pool_backward(d, shape, arg, layer.kernel, layer.stride)
    return grads


def _as_batch(spec: NetworkSpec, images: Sequence[ImageBuffer]) -> np.ndarray:
    for img in images:
        if img.shape != (spec.input_size, spec.input_size, spec.channels):
            raise ValueError(f"input shape {img.shape} does not match network input "
                             f"{(spec.input_size, spec.input_size, spec.channels)}")
    return np.stack([img.pixels for img in images]).transpose(0, 3, 1, 2)


def label_to_class(label: int) -> int:
    if label == MALE:
        return 0
    if label == FEMALE:
        return 1
    raise ValueError(f"label must be +1 or -1, got {label!r}")


def _cross_entropy(probs, targets) -> float:
    p = probs[np.arange(len(targets)), targets]
    return float(-np.mean(np.log(np.maximum(p, 1e-300))))


# --------------------------------------------------------------------------
# public operations


def forward_batch(net: NetworkState, images: Sequence[ImageBuffer]) -> np.ndarray:
    """``(N, 2)`` class probabilities."""
    probs, _ = _forward(net, _as_batch(net.spec, images))
    return probs


def forward(net: NetworkState, img: ImageBuffer) -> tuple[float, float]:
    p = forward_batch(net, [img])[0]
    return float(p[0]), float(p[1])


def score_from_probs(p_male: float, p_female: float) -> tuple[int, float]:
    if p_male >= p_female:
        return MALE, float(p_male)
    return FEMALE, float(p_female)


def predict_score(net: NetworkState, patch: ImageBuffer) -> tuple[int, float]:
    """Winning class (+1 MALE on ties) and its softmax probability."""
    return score_from_probs(*forward(net, patch))


def predict_scores(net: NetworkState, patches: Sequence[ImageBuffer],
                   batch: int = 256) -> list[tuple[int, float]]:
    out = []
    for i in range(0, len(patches), batch):
        probs = forward_batch(net, patches[i:i + batch])
        out.extend(score_from_probs(p[0], p[1]) for p in probs)
    return out


def loss_and_gradients(net: NetworkState, x: np.ndarray, targets: np.ndarray):
    probs, caches = _forward(net, x, keep=True)
    return _cross_entropy(probs, targets), _backward(net, caches, probs, targets)


def batch_loss(net: NetworkState, images: Sequence[ImageBuffer], labels: Sequence[int]) -> float:
    targets = np.array([label_to_class(l) for l in labels])
    probs, _ = _forward(net, _as_batch(net.spec, images))
    return _cross_entropy(probs, targets)


def train(net: NetworkState, samples: Sequence[tuple[ImageBuffer, int]],
          cfg: TrainConfig | None = None) -> NetworkState:
    """Minibatch SGD with momentum on the mean cross-entropy; returns a new state.

    Batches are drawn by walking seeded permutations of the samples, so the
    result depends only on the inputs and ``cfg.seed``.
    """
    cfg = cfg or TrainConfig()
    if not samples:
        raise ValueError("training needs at least one sample")
    x = _as_batch(net.spec, [img for img, _ in samples])
    targets = np.array([label_to_class(label) for _, label in samples])
    state = net.copy()
    velocity = [np.zeros_like(p) for p in state.params]
    rng = np.random.default_rng(cfg.seed)
    n = len(samples)
    order = rng.permutation(n)
    pos = 0
    for it in range(cfg.iterations):
        if cfg.batch_size >= n:
            idx = order
        else:
            if pos + cfg.batch_size > n:
                order = rng.permutation(n)
                pos = 0
            idx = order[pos:pos + cfg.batch_size]
            pos += cfg.batch_size
        loss, grads = loss_and_gradients(state, x[idx], targets[idx])
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
            raise TrainingDivergedError(it, loss)
        if cfg.learning_rate == 0:
            continue
        for p, v, g in zip(state.params, velocity, grads):
            v *= cfg.momentum
            v -= cfg.learning_rate * g
            p += v
        if not all(np.all(np.isfinite(p)) for p in state.params):
            raise TrainingDivergedError(it, float("nan"))
    return state


def accuracy(net: NetworkState, samples: Sequence[tuple[ImageBuffer, int]]) -> float:
    preds = predict_scores(net, [img for img, _ in samples])
    return float(np.mean([c == label for (c, _), (_, label) in zip(preds, samples)]))


def gradient_check(spec: NetworkSpec, img: ImageBuffer, label: int, eps: float = 1e-5,
                   seed: int = 0, net: NetworkState | None = None,
                   floor: float = 1e-6) -> float:
    """Max relative error between backprop and central finite differences of the loss.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    vanishing gradients from turning round-off into large ratios.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    if spec.n_params() > 10_000:
        raise ValueError(f"gradient check limited to 10^4 parameters, spec has {spec.n_params()}")
    net = net.copy() if net is not None else init_network(spec, seed)
    x = _as_batch(spec, [img])
    t = np.array([label_to_class(label)])
    _, grads = loss_and_gradients(net, x, t)

    def loss():
        probs, _ = _forward(net, x)
        return _cross_entropy(probs, t)

    worst = 0.0
    for p, g in zip(net.params, grads):
        flat_p, flat_g = p.reshape(-1), g.reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + eps
            up = loss()
            flat_p[i] = orig - eps
            down = loss()
            flat_p[i] = orig
            numeric = (up - down) / (2 * eps)
            denom = max(abs(numeric), abs(flat_g[i]), floor)
            worst = max(worst, abs(numeric - flat_g[i]) / denom)
    return worst


# --------------------------------------------------------------------------
# serialization


def network_to_bytes(net: NetworkState) -> bytes:
    spec_bytes = net.spec.to_json().encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(spec_bytes)))
    buf.write(spec_bytes)
    for p in net.params:
        buf.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return buf.getvalue()


def network_from_bytes(data: bytes) -> NetworkState:
    if len(data) < 12 or data[:4] != MAGIC:
        raise NetworkVersionError("not a network file (bad magic bytes)")
    version, spec_len = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise NetworkVersionError(f"unsupported network format version {version}")
    offset = 12 + spec_len
    try:
        spec = NetworkSpec.from_json(data[12:offset].decode("utf-8"))
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise NetworkFormatError(f"corrupt network spec: {exc}") from exc
    params = []
    for shape in spec.param_shapes():
        nbytes = 8 * int(np.prod(shape))
        if offset + nbytes > len(data):
            raise NetworkFormatError("truncated network weights")
        params.append(np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=offset)
                      .astype(np.float64).reshape(shape))
        offset += nbytes
    if offset != len(data):
        raise NetworkFormatError(f"{len(data) - offset} trailing bytes after network weights")
    try:
        return NetworkState(spec, params)
    except ValueError as exc:
        raise NetworkFormatError(str(exc)) from exc


def save_network(net: NetworkState, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(network_to_bytes(net))


def load_network(path) -> NetworkState:
    return network_from_bytes(Path(path).read_bytes())


def with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    return replace(cfg, seed=seed)
