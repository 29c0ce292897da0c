"""Binary network checkpoints.

Little-endian layout: magic "RPTN", format version (u32), iteration index
(u32), class count N (u32), N class scores (i32), input shape C,H,W
(3 x u32), layer-spec table, then raw float32 parameter blocks in layer
order (weights then biases, C row-major), and a trailing CRC32 (u32) of
all preceding bytes.  Writes are atomic (temp file + rename).
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .nn import Conv, Dense, Flatten, LayerSpec, MaxPool, Network, ReLU, infer_shapes

MAGIC = b"RPTN"
FORMAT_VERSION = 1

_KIND_IDS: dict[type, int] = {Conv: 0, ReLU: 1, MaxPool: 2, Flatten: 3, Dense: 4}
_KINDS_BY_ID = {v: k for k, v in _KIND_IDS.items()}


class CheckpointError(RuntimeError):
    """Unreadable, truncated, or version-incompatible checkpoint file."""


def _pack_spec(spec: LayerSpec) -> bytes:
    kind = _KIND_IDS[type(spec)]
    trainable = int(getattr(spec, "trainable", False))
    head = struct.pack("<II", kind, trainable)
    if isinstance(spec, Conv):
        return head + struct.pack(
            "<5I", spec.in_channels, spec.out_channels, spec.kernel_size, spec.stride, spec.padding
        )
    if isinstance(spec, MaxPool):
        return head + struct.pack("<2I", spec.window, spec.stride)
    if isinstance(spec, Dense):
        return head + struct.pack("<2I", spec.in_features, spec.out_features)
    return head


def save_checkpoint(net: Network, iteration: int, path) -> None:
    """Serialize the network and its iteration tag.  Parameters must be
    float32 (the production dtype); round-trips are bitwise."""
    for p in net.params:
        for arr in p.values():
            if arr.dtype != np.float32:
                raise ValueError("checkpoints store float32 parameters only")
    if iteration < 0:
        raise ValueError("iteration must be >= 0")

    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<III", FORMAT_VERSION, iteration, net.num_classes)
    blob += struct.pack(f"<{net.num_classes}i", *net.class_scores)
    blob += struct.pack("<3I", *net.input_shape)
    blob += struct.pack("<I", len(net.layers))
    for spec in net.layers:
        blob += _pack_spec(spec)
    for spec, p in zip(net.layers, net.params):
        if isinstance(spec, (Conv, Dense)):
            blob += np.ascontiguousarray(p["w"]).tobytes()
            blob += np.ascontiguousarray(p["b"]).tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)) & 0xFFFFFFFF)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> tuple[Network, int]:
    """Read a checkpoint, verify integrity, and rebuild the network.
    Returns (network, iteration)."""
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 4:
        raise CheckpointError(f"{path}: truncated checkpoint")
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    (stored_crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored_crc:
        raise CheckpointError(f"{path}: CRC mismatch, file corrupt or truncated")

    r = _Reader(data[:-4], path)
    r.take(4)  # magic
    version, iteration, n_classes = r.unpack("<III")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    class_scores = r.unpack(f"<{n_classes}i")
    input_shape = r.unpack("<3I")
    (n_layers,) = r.unpack("<I")

    layers: list[LayerSpec] = []
    for _ in range(n_layers):
        kind_id, trainable = r.unpack("<II")
        kind = _KINDS_BY_ID.get(kind_id)
        if kind is None:
            raise CheckpointError(f"{path}: unknown layer kind {kind_id}")
        if kind is Conv:
            ic, oc, k, s, p = r.unpack("<5I")
            layers.append(Conv(ic, oc, k, s, p, trainable=bool(trainable)))
        elif kind is MaxPool:
            w, s = r.unpack("<2I")
            layers.append(MaxPool(w, s))
        elif kind is Dense:
            fi, fo = r.unpack("<2I")
            layers.append(Dense(fi, fo, trainable=bool(trainable)))
        elif kind is ReLU:
            layers.append(ReLU())
        else:
            layers.append(Flatten())

    params: list[dict[str, np.ndarray]] = []
    for spec in layers:
        if isinstance(spec, Conv):
            wshape = (spec.out_channels, spec.in_channels, spec.kernel_size, spec.kernel_size)
            bshape = (spec.out_channels,)
        elif isinstance(spec, Dense):
            wshape = (spec.in_features, spec.out_features)
            bshape = (spec.out_features,)
        else:
            params.append({})
            continue
        w = np.frombuffer(r.take(4 * int(np.prod(wshape))), dtype="<f4").reshape(wshape)
        b = np.frombuffer(r.take(4 * int(np.prod(bshape))), dtype="<f4")
        params.append({"w": w.copy(), "b": b.copy()})
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: {len(r.data) - r.pos} trailing bytes")

    net = Network(tuple(layers), params, tuple(class_scores), tuple(input_shape))
    infer_shapes(net.layers, net.input_shape)  # reject structurally invalid files
    return net, iteration


def describe_checkpoint(path) -> str:
    """Human-readable header summary (no parameter data)."""
    net, iteration = load_checkpoint(path)
    lines = [
        f"checkpoint: {path}",
        f"format version: {FORMAT_VERSION}",
        f"iteration: {iteration}",
        f"classes: {net.num_classes} (scores {', '.join(map(str, net.class_scores))})",
        f"input shape: {net.input_shape[0]}x{net.input_shape[1]}x{net.input_shape[2]} (CHW)",
        "layers:",
    ]
    for i, spec in enumerate(net.layers):
        n_params = sum(arr.size for arr in net.params[i].values())
        suffix = f"  [{n_params} params]" if n_params else ""
        lines.append(f"  {i}: {spec}{suffix}")
    return "\n".join(lines)
