"""Small differentiable CNN engine.

Supports Conv / ReLU / MaxPool / Flatten / Dense stacks with a softmax
classification head, exact backprop, SGD with momentum, head replacement,
layer freezing, and access to first-conv feature maps and per-class
sigmoid activations of the head logits.

Arrays are numpy, NCHW for image batches, float32 by default.  All
randomness flows through explicit integer seeds, so identical seeds give
bit-identical parameters and training trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np


class BuildError(ValueError):
    """Layer stack is internally inconsistent (shape or head contract)."""


# ---------------------------------------------------------------------------
# Layer specs


@dataclass(frozen=True)
class Conv:
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding: int = 0
    trainable: bool = True


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool:
    window: int
    stride: int


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    trainable: bool = True


LayerSpec = Union[Conv, ReLU, MaxPool, Flatten, Dense]


def _positive(name: str, value: int) -> None:
    if value < 1:
        raise BuildError(f"{name} must be >= 1, got {value}")


def _check_spec(spec: LayerSpec) -> None:
    if isinstance(spec, Conv):
        _positive("in_channels", spec.in_channels)
        _positive("out_channels", spec.out_channels)
        _positive("kernel_size", spec.kernel_size)
        _positive("stride", spec.stride)
        if spec.padding < 0:
            raise BuildError(f"padding must be >= 0, got {spec.padding}")
    elif isinstance(spec, MaxPool):
        _positive("window", spec.window)
        _positive("stride", spec.stride)
    elif isinstance(spec, Dense):
        _positive("in_features", spec.in_features)
        _positive("out_features", spec.out_features)


def infer_shapes(
    layers: tuple[LayerSpec, ...], input_shape: tuple[int, int, int]
) -> list[tuple[int, ...]]:
    """Output shape after each layer, raising BuildError on the first
    incompatible pair."""
    shapes: list[tuple[int, ...]] = []
    cur: tuple[int, ...] = tuple(input_shape)

    def fail(idx: int, spec: LayerSpec, why: str) -> None:
        prev = "input" if idx == 0 else f"layer {idx - 1}"
        raise BuildError(
            f"{prev} (shape {cur}) -> layer {idx} ({type(spec).__name__}): {why}"
        )

    for idx, spec in enumerate(layers):
        _check_spec(spec)
        if isinstance(spec, Conv):
            if len(cur) != 3:
                fail(idx, spec, "convolution needs a CHW input")
            if cur[0] != spec.in_channels:
                fail(idx, spec, f"expected {spec.in_channels} channels, got {cur[0]}")
            h = (cur[1] + 2 * spec.padding - spec.kernel_size) // spec.stride + 1
            w = (cur[2] + 2 * spec.padding - spec.kernel_size) // spec.stride + 1
            if h < 1 or w < 1:
                fail(idx, spec, "kernel larger than padded input")
            cur = (spec.out_channels, h, w)
        elif isinstance(spec, ReLU):
            pass
        elif isinstance(spec, MaxPool):
            if len(cur) != 3:
                fail(idx, spec, "pooling needs a CHW input")
            h = (cur[1] - spec.window) // spec.stride + 1
            w = (cur[2] - spec.window) // spec.stride + 1
            if h < 1 or w < 1:
                fail(idx, spec, "window larger than input")
            cur = (cur[0], h, w)
        elif isinstance(spec, Flatten):
            cur = (int(np.prod(cur)),)
        elif isinstance(spec, Dense):
            if len(cur) != 1:
                fail(idx, spec, "dense needs a flat input (insert Flatten)")
            if cur[0] != spec.in_features:
                fail(idx, spec, f"expected {spec.in_features} features, got {cur[0]}")
            cur = (spec.out_features,)
        else:
            raise BuildError(f"unknown layer kind {type(spec).__name__}")
        shapes.append(cur)
    return shapes


# ---------------------------------------------------------------------------
# Network


@dataclass
class Network:
    """A built layer stack.  The final Dense produces one logit per score
    class; softmax and argmax classification sit on top of it."""

    layers: tuple[LayerSpec, ...]
    params: list[dict[str, np.ndarray]]
    class_scores: tuple[int, ...]
    input_shape: tuple[int, int, int]

    @property
    def num_classes(self) -> int:
        return len(self.class_scores)

    def copy(self) -> "Network":
        return Network(
            layers=self.layers,
            params=[{k: v.copy() for k, v in p.items()} for p in self.params],
            class_scores=self.class_scores,
            input_shape=self.input_shape,
        )


def default_architecture(num_classes: int, image_size: int = 32) -> tuple[LayerSpec, ...]:
    """Desk-scale stack for image_size x image_size RGB inputs."""
    if image_size % 4 != 0:
        raise BuildError("image_size must be divisible by 4")
    side = image_size // 4
    return (
        Conv(3, 16, 5, stride=1, padding=2),
        ReLU(),
        MaxPool(2, 2),
        Conv(16, 32, 3, stride=1, padding=1),
        ReLU(),
        MaxPool(2, 2),
        Flatten(),
        Dense(32 * side * side, 64),
        ReLU(),
        Dense(64, num_classes),
    )


def _validate_class_scores(class_scores) -> tuple[int, ...]:
    scores = tuple(int(s) for s in class_scores)
    if len(scores) < 2:
        raise BuildError("need at least 2 score classes")
    if any(b <= a for a, b in zip(scores, scores[1:])):
        raise BuildError("class_scores not strictly increasing")
    return scores


def _init_layer(spec: LayerSpec, rng: np.random.Generator, dtype) -> dict[str, np.ndarray]:
    """He fan-in weights, zero biases."""
    if isinstance(spec, Conv):
        fan_in = spec.in_channels * spec.kernel_size * spec.kernel_size
        w = rng.standard_normal(
            (spec.out_channels, spec.in_channels, spec.kernel_size, spec.kernel_size),
            dtype=dtype,
        ) * dtype(np.sqrt(2.0 / fan_in))
        return {"w": w, "b": np.zeros(spec.out_channels, dtype=dtype)}
    if isinstance(spec, Dense):
        w = rng.standard_normal((spec.in_features, spec.out_features), dtype=dtype) * dtype(
            np.sqrt(2.0 / spec.in_features)
        )
        return {"w": w, "b": np.zeros(spec.out_features, dtype=dtype)}
    return {}


def build_network(
    layers,
    class_scores,
    seed: int,
    input_shape: tuple[int, int, int] = (3, 32, 32),
    dtype=np.float32,
) -> Network:
    """Validate the stack, then initialize parameters deterministically
    from the seed.  Same (layers, seed) twice gives bitwise-equal params."""
    layers = tuple(layers)
    scores = _validate_class_scores(class_scores)
    shapes = infer_shapes(layers, input_shape)
    if not layers or not isinstance(layers[-1], Dense):
        raise BuildError("final layer must be Dense (the classification head)")
    if shapes[-1][0] != len(scores):
        raise BuildError(
            f"head emits {shapes[-1][0]} logits but {len(scores)} class_scores given"
        )
    dtype = np.dtype(dtype).type
    rng = np.random.default_rng(seed)
    params = [_init_layer(spec, rng, dtype) for spec in layers]
    return Network(layers, params, scores, tuple(input_shape))


def replace_head(net: Network, new_class_scores, seed: int) -> Network:
    """Re-dimension the final Dense to the new class list and re-init it
    from the seed; every other parameter is copied bitwise."""
    scores = _validate_class_scores(new_class_scores)
    head = net.layers[-1]
    new_head = Dense(head.in_features, len(scores), trainable=head.trainable)
    dtype = net.params[-1]["w"].dtype.type
    rng = np.random.default_rng(seed)
    params = [{k: v.copy() for k, v in p.items()} for p in net.params[:-1]]
    params.append(_init_layer(new_head, rng, dtype))
    return Network(net.layers[:-1] + (new_head,), params, scores, net.input_shape)


# ---------------------------------------------------------------------------
# Forward / backward


@dataclass
class BatchActivations:
    """Per-layer outputs of one forward pass plus softmax probabilities.
    Caches hold whatever each layer needs for its backward step."""

    batch: np.ndarray
    outputs: list[np.ndarray]
    probs: np.ndarray
    caches: list = field(repr=False, default_factory=list)


def _im2col(x: np.ndarray, k: int, stride: int, padding: int):
    """Patch matrix (B*Ho*Wo, C*k*k) so convolution becomes one GEMM."""
    b = x.shape[0]
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * ho * wo, -1)
    return cols, ho, wo


def _col2im(dcols, x_shape, k: int, stride: int, padding: int, ho: int, wo: int):
    """Scatter-add patch gradients back onto the (padded) input."""
    b, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    dxp = np.zeros((b, c, hp, wp), dtype=dcols.dtype)
    d = dcols.reshape(b, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += d[
                :, :, :, :, i, j
            ]
    if padding:
        return dxp[:, :, padding : hp - padding, padding : wp - padding]
    return dxp


def _layer_forward(spec: LayerSpec, p: dict[str, np.ndarray], x: np.ndarray):
    """Returns (output, cache)."""
    if isinstance(spec, Conv):
        cols, ho, wo = _im2col(x, spec.kernel_size, spec.stride, spec.padding)
        wf = p["w"].reshape(spec.out_channels, -1)
        out = cols @ wf.T + p["b"]
        out = (
            out.reshape(x.shape[0], ho * wo, spec.out_channels)
            .transpose(0, 2, 1)
            .reshape(x.shape[0], spec.out_channels, ho, wo)
        )
        return out, (cols, x.shape, ho, wo)
    if isinstance(spec, ReLU):
        out = np.maximum(x, 0)
        return out, None
    if isinstance(spec, MaxPool):
        win = np.lib.stride_tricks.sliding_window_view(
            x, (spec.window, spec.window), axis=(2, 3)
        )[:, :, :: spec.stride, :: spec.stride]
        b, c, ho, wo = win.shape[:4]
        flat = win.reshape(b, c, ho, wo, -1)
        amax = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, amax[..., None], axis=-1)[..., 0]
        return np.ascontiguousarray(out), (amax, x.shape)
    if isinstance(spec, Flatten):
        return x.reshape(x.shape[0], -1), x.shape
    if isinstance(spec, Dense):
        return x @ p["w"] + p["b"], x
    raise BuildError(f"unknown layer kind {type(spec).__name__}")


def _layer_backward(spec: LayerSpec, p, out, cache, dout):
    """Returns (dx, grads-or-None)."""
    if isinstance(spec, Conv):
        cols, x_shape, ho, wo = cache
        b = dout.shape[0]
        dout_flat = np.ascontiguousarray(
            dout.reshape(b, spec.out_channels, ho * wo).transpose(0, 2, 1)
        ).reshape(b * ho * wo, spec.out_channels)
        dw = (dout_flat.T @ cols).reshape(p["w"].shape)
        db = dout_flat.sum(axis=0)
        dcols = dout_flat @ p["w"].reshape(spec.out_channels, -1)
        dx = _col2im(dcols, x_shape, spec.kernel_size, spec.stride, spec.padding, ho, wo)
        return dx, {"w": dw, "b": db}
    if isinstance(spec, ReLU):
        return dout * (out > 0), None
    if isinstance(spec, MaxPool):
        amax, x_shape = cache
        b, c, ho, wo = dout.shape
        dx = np.zeros(x_shape, dtype=dout.dtype)
        iy = np.arange(ho)[None, None, :, None] * spec.stride + amax // spec.window
        ix = np.arange(wo)[None, None, None, :] * spec.stride + amax % spec.window
        bi = np.arange(b)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        np.add.at(dx, (bi, ci, iy, ix), dout)
        return dx, None
    if isinstance(spec, Flatten):
        return dout.reshape(cache), None
    if isinstance(spec, Dense):
        x = cache
        return dout @ p["w"].T, {"w": x.T @ dout, "b": dout.sum(axis=0)}
    raise BuildError(f"unknown layer kind {type(spec).__name__}")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def forward(net: Network, batch: np.ndarray) -> BatchActivations:
    """Run the full stack, retaining every layer output for backprop and
    feature-map extraction.  Softmax rows sum to 1 within 1e-6."""
    batch = np.asarray(batch)
    if batch.ndim != 4 or batch.shape[1:] != net.input_shape:
        raise ValueError(
            f"batch shape {batch.shape} does not match expected "
            f"(N, {', '.join(map(str, net.input_shape))})"
        )
    outputs: list[np.ndarray] = []
    caches: list = []
    x = batch
    for spec, p in zip(net.layers, net.params):
        x, cache = _layer_forward(spec, p, x)
        outputs.append(x)
        caches.append(cache)
    logits = outputs[-1]
    if not np.isfinite(logits).all():
        raise FloatingPointError("non-finite logits in forward pass")
    return BatchActivations(batch=batch, outputs=outputs, probs=softmax(logits), caches=caches)


@dataclass
class Gradients:
    """Per-layer parameter gradients (None for frozen or parameter-free
    layers) plus the mean cross-entropy over the batch."""

    by_layer: list[dict[str, np.ndarray] | None]
    loss: float


def backward(net: Network, acts: BatchActivations, target_classes) -> Gradients:
    """Cross-entropy backprop through the softmax head.  Targets are class
    indices into class_scores."""
    targets = np.asarray(target_classes, dtype=np.intp)
    n = acts.probs.shape[0]
    if targets.shape != (n,):
        raise ValueError(f"expected {n} target indices, got shape {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= net.num_classes):
        raise ValueError(
            f"target class index out of range [0, {net.num_classes})"
        )
    picked = acts.probs[np.arange(n), targets].astype(np.float64)
    loss = float(-np.mean(np.log(np.maximum(picked, 1e-300))))

    dlogits = acts.probs.copy()
    dlogits[np.arange(n), targets] -= 1
    dlogits /= n

    grads: list[dict[str, np.ndarray] | None] = [None] * len(net.layers)
    dx = dlogits
    for idx in range(len(net.layers) - 1, -1, -1):
        spec = net.layers[idx]
        dx, g = _layer_backward(spec, net.params[idx], acts.outputs[idx], acts.caches[idx], dx)
        if g is not None and getattr(spec, "trainable", False):
            grads[idx] = g
    return Gradients(by_layer=grads, loss=loss)


def sgd_step(
    net: Network,
    grads: Gradients,
    lr: float,
    momentum: float = 0.0,
    velocity: dict | None = None,
) -> dict:
    """One SGD-with-momentum update in place: v = m*v + g, p -= lr*v.
    Returns the velocity buffers to pass into the next step; frozen layers
    are untouched."""
    if velocity is None:
        velocity = {}
    for idx, g in enumerate(grads.by_layer):
        if g is None:
            continue
        for key, gval in g.items():
            if gval.shape != net.params[idx][key].shape:
                raise ValueError(f"gradient shape mismatch at layer {idx}/{key}")
            v = velocity.get((idx, key))
            v = gval.copy() if v is None else momentum * v + gval
            velocity[(idx, key)] = v
            net.params[idx][key] -= np.asarray(lr * v, dtype=net.params[idx][key].dtype)
    return velocity


# ---------------------------------------------------------------------------
# Inspection of trained networks


def _as_batch(net: Network, image: np.ndarray) -> np.ndarray:
    """Accept a single image as CHW or HWC and return a 1-image NCHW batch."""
    image = np.asarray(image)
    if image.shape == net.input_shape:
        return image[None]
    c = net.input_shape[0]
    if image.ndim == 3 and image.shape[2] == c and image.shape[:2] == net.input_shape[1:]:
        return np.ascontiguousarray(image.transpose(2, 0, 1))[None]
    raise ValueError(
        f"image shape {image.shape} does not match network input {net.input_shape}"
    )


def conv1_feature_maps(
    net: Network, image: np.ndarray, post_activation: bool = False
) -> list[np.ndarray]:
    """Feature maps of the first Conv layer for one image, one HxW map per
    output channel.  Pre-activation by default: rectified maps go all-zero
    on channels the ReLU has shut off, which makes them degenerate inputs
    for correlation-based channel selection.  post_activation applies the
    rectification for visualization-style use."""
    conv_idx = next(
        (i for i, spec in enumerate(net.layers) if isinstance(spec, Conv)), None
    )
    if conv_idx is None:
        raise ValueError("network has no convolution layer")
    x = _as_batch(net, image)
    for spec, p in zip(net.layers[: conv_idx + 1], net.params[: conv_idx + 1]):
        x, _ = _layer_forward(spec, p, x)
    if post_activation:
        x = np.maximum(x, 0)
    return [np.ascontiguousarray(x[0, c]) for c in range(x.shape[1])]


def head_logits(net: Network, batch: np.ndarray) -> np.ndarray:
    """Pre-softmax logits of the final Dense layer for an NCHW batch."""
    x = batch
    if x.ndim != 4 or x.shape[1:] != net.input_shape:
        raise ValueError(
            f"batch shape {x.shape} does not match expected (N, "
            f"{', '.join(map(str, net.input_shape))})"
        )
    for spec, p in zip(net.layers, net.params):
        x, _ = _layer_forward(spec, p, x)
    return x


def fc_likelihoods(net: Network, image: np.ndarray, use_softmax: bool = False) -> np.ndarray:
    """Per-class membership values for one image: sigmoid of each head
    logit by default (values in (0,1), not normalized), or the softmax row
    when use_softmax is set."""
    logits = head_logits(net, _as_batch(net, image))
    if use_softmax:
        return softmax(logits)[0].astype(np.float64)
    return sigmoid(logits[0])
