"""Victim model abstraction: a toy differentiable encoder plus a promptable
segmenter, and a JSON-lines sidecar client for swapping in an external
encoder.

The toy encoder is two stride-2 convolutions with relu (3 -> 8 -> 16
channels, no biases) followed by per-position L2 normalization of the
feature map, flattened to one vector. Segmentation comes from the same
network: the channel argmax of the pre-normalization feature map,
upsampled to pixel resolution, split into 4-connected constant-label
components.
"""

import base64
import json
import math
import subprocess
import threading
import queue
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from . import regions
from .tensor_core import (
    ShapeError,
    Tensor,
    _node,
    backward,
    conv2d,
    dot,
    l2_normalize_rows,
    relu,
    reshape,
)

FEATURE_CHANNELS = 16
DOWNSAMPLE = 4


class CapabilityError(RuntimeError):
    """The victim implementation does not support the requested operation."""


class TransportError(RuntimeError):
    """Sidecar protocol failure; the offending raw message is attached."""

    def __init__(self, message, raw=None):
        super().__init__(message)
        self.raw = raw


@dataclass(frozen=True)
class PointPrompt:
    x: int
    y: int


class VictimModel(Protocol):
    def encode(self, image): ...

    def encode_vjp(self, image, cotangent): ...

    def segment_everything(self, image): ...

    def segment_point(self, image, prompt): ...


@dataclass(frozen=True, eq=False)
class ToyEncoderWeights:
    conv1: np.ndarray  # 3 x 3 x 3 x 8
    conv2: np.ndarray  # 3 x 3 x 8 x 16
    seed: int


def init_toy_weights(seed):
    """Weights are a pure function of the seed: uniform draws in
    +/- sqrt(1/fan_in) from PCG64(seed), conv1 first, then conv2."""
    rng = np.random.Generator(np.random.PCG64(seed))

    def draw(shape):
        fan_in = shape[0] * shape[1] * shape[2]
        bound = math.sqrt(1.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(np.float32)

    return ToyEncoderWeights(draw((3, 3, 3, 8)), draw((3, 3, 8, FEATURE_CHANNELS)), seed)


def _check_image(image):
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"images are H x W x 3, got shape {arr.shape}")
    h, w, _ = arr.shape
    if h % DOWNSAMPLE or w % DOWNSAMPLE:
        raise ShapeError(
            f"image dimensions must be divisible by {DOWNSAMPLE}, got {h}x{w}; "
            "pad the image first (the cli does this automatically)"
        )
    return arr


def _edge_pad1(x):
    """Pad one pixel by edge replication, differentiable (gradients of the
    replicated border fold back onto the edge pixels)."""
    data = np.pad(x.data, ((1, 1), (1, 1), (0, 0)), mode="edge")
    out = _node(data, (x,), "edgepad")

    def _bw():
        g = out.grad
        core = g[1:-1, 1:-1].copy()
        core[0, :] += g[0, 1:-1]
        core[-1, :] += g[-1, 1:-1]
        core[:, 0] += g[1:-1, 0]
        core[:, -1] += g[1:-1, -1]
        core[0, 0] += g[0, 0]
        core[0, -1] += g[0, -1]
        core[-1, 0] += g[-1, 0]
        core[-1, -1] += g[-1, -1]
        x.grad += core

    out._backward = _bw
    return out


def toy_feature_map(weights, x):
    """Pre-normalization feature map node, (H/4) x (W/4) x 16.

    Each stride-2 conv sees an edge-replicated border instead of zeros so
    that a constant-color image keeps a constant label map."""
    k1 = Tensor(weights.conv1, dtype=x.data.dtype)
    k2 = Tensor(weights.conv2, dtype=x.data.dtype)
    h1 = relu(conv2d(_edge_pad1(x), k1, stride=2, pad=0))
    return relu(conv2d(_edge_pad1(h1), k2, stride=2, pad=0))


def toy_encode_tape(weights, x):
    """Full encoder as one differentiable graph: feature map, rows
    L2-normalized per spatial position, flattened."""
    fmap = toy_feature_map(weights, x)
    fh, fw, fc = fmap.data.shape
    rows = reshape(fmap, (fh * fw, fc))
    return reshape(l2_normalize_rows(rows), (fh * fw * fc,))


def toy_encode(weights, image):
    return toy_encode_tape(weights, Tensor(_check_image(image))).data


def toy_label_map(weights, image):
    """Channel argmax of the feature map, nearest-neighbor upsampled to H x W."""
    x = Tensor(_check_image(image))
    fmap = toy_feature_map(weights, x).data
    labels = fmap.argmax(axis=2).astype(np.int32)
    return labels.repeat(DOWNSAMPLE, axis=0).repeat(DOWNSAMPLE, axis=1)


def toy_segment_everything(weights, image, min_area=16):
    """One mask per 4-connected constant-label component with area >= min_area,
    ordered by (label ascending, first pixel in scan order)."""
    if min_area < 1:
        raise ValueError(f"min_area must be >= 1, got {min_area}")
    labels = toy_label_map(weights, image)
    masks = []
    for value in range(FEATURE_CHANNELS):
        region = labels == value
        if not region.any():
            continue
        for comp in regions.connected_components(region, connectivity=4):
            if regions.mask_area(comp) >= min_area:
                masks.append(comp)
    return masks


def toy_segment_point(weights, image, prompt):
    """The constant-label component containing the prompt pixel (no area filter)."""
    labels = toy_label_map(weights, image)
    h, w = labels.shape
    if not (0 <= prompt.x < w and 0 <= prompt.y < h):
        raise ValueError(f"prompt ({prompt.x}, {prompt.y}) outside {w}x{h} image")
    region = labels == labels[prompt.y, prompt.x]
    return regions.component_containing(region, prompt.y, prompt.x)


class ToyVictim:
    """In-process victim; deterministic and safe for concurrent reads."""

    def __init__(self, seed=0, min_area=16, weights=None):
        self.weights = weights if weights is not None else init_toy_weights(seed)
        self.min_area = min_area

    def encode(self, image):
        return toy_encode(self.weights, image)

    def encode_vjp(self, image, cotangent):
        x = Tensor(_check_image(image))
        feats = toy_encode_tape(self.weights, x)
        cot = np.asarray(cotangent, dtype=np.float32).reshape(-1)
        if cot.shape != feats.data.shape:
            raise ShapeError(
                f"cotangent length {cot.shape[0]} != feature length {feats.data.shape[0]}"
            )
        return backward(dot(feats, Tensor(cot)), x)

    def segment_everything(self, image, min_area=None):
        area = self.min_area if min_area is None else min_area
        return toy_segment_everything(self.weights, image, min_area=area)

    def segment_point(self, image, prompt):
        return toy_segment_point(self.weights, image, prompt)


def _b64(arr):
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f4").tobytes()).decode("ascii")


def _unb64(data, shape):
    raw = base64.b64decode(data.encode("ascii"))
    arr = np.frombuffer(raw, dtype="<f4")
    expected = int(np.prod(shape)) if shape else 1
    if arr.size != expected:
        raise TransportError(
            f"payload has {arr.size} floats, expected {expected} for shape {shape}",
            raw=data[:128],
        )
    return arr.reshape(shape).astype(np.float32, copy=True)


class OracleClient:
    """Client for the newline-delimited JSON gradient oracle protocol.

    Requests carry an id, an op (encode / encode_vjp), shapes, and base64
    little-endian float32 payloads; the sidecar answers one response per
    request, in order. Requests are serialized per process.
    """

    def __init__(self, command, timeout=30.0):
        self.command = list(command)
        self.timeout = timeout
        self._lock = threading.Lock()
        self._next_id = 0
        self._proc = subprocess.Popen(
            self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True,
            bufsize=1,
        )
        self._lines = queue.Queue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()

    def _pump(self):
        for line in self._proc.stdout:
            self._lines.put(line)
        self._lines.put(None)

    def _call(self, request):
        with self._lock:
            request["id"] = self._next_id
            self._next_id += 1
            try:
                self._proc.stdin.write(json.dumps(request) + "\n")
                self._proc.stdin.flush()
            except (BrokenPipeError, ValueError) as exc:
                raise TransportError(f"sidecar pipe closed: {exc}") from exc
            try:
                line = self._lines.get(timeout=self.timeout)
            except queue.Empty:
                raise TransportError(f"sidecar timed out after {self.timeout}s") from None
        if line is None:
            raise TransportError("sidecar closed its output stream")
        try:
            response = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TransportError(f"sidecar sent invalid JSON: {exc}", raw=line) from exc
        if response.get("id") != request["id"]:
            raise TransportError(
                f"response id {response.get('id')} != request id {request['id']}", raw=line
            )
        if not response.get("ok"):
            raise TransportError(f"sidecar error: {response.get('error')}", raw=line)
        return response

    def encode(self, image):
        image = np.asarray(image, dtype=np.float32)
        resp = self._call({"op": "encode", "shape": list(image.shape), "data": _b64(image)})
        return _unb64(resp["data"], tuple(resp["shape"]))

    def encode_vjp(self, image, cotangent):
        image = np.asarray(image, dtype=np.float32)
        cot = np.asarray(cotangent, dtype=np.float32).reshape(-1)
        resp = self._call({
            "op": "encode_vjp",
            "shape": list(image.shape),
            "data": _b64(image),
            "cotangent_shape": [int(cot.shape[0])],
            "cotangent": _b64(cot),
        })
        return _unb64(resp["data"], tuple(resp["shape"]))

    def close(self):
        if self._proc.stdin and not self._proc.stdin.closed:
            try:
                self._proc.stdin.close()
            except BrokenPipeError:
                pass
        try:
            self._proc.wait(timeout=2)
        except subprocess.TimeoutExpired:
            self._proc.kill()
            self._proc.wait(timeout=10)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


class SidecarVictim:
    """Victim whose encoder lives behind an OracleClient.

    The wire protocol only covers encode / encode_vjp; segmentation
    delegates to an optional in-process victim and otherwise reports a
    capability error.
    """

    def __init__(self, client, segmenter=None):
        self.client = client
        self.segmenter = segmenter

    def encode(self, image):
        return self.client.encode(image)

    def encode_vjp(self, image, cotangent):
        return self.client.encode_vjp(image, cotangent)

    def segment_everything(self, image, min_area=None):
        if self.segmenter is None:
            raise CapabilityError("sidecar victim has no segmenter")
        if min_area is None:
            return self.segmenter.segment_everything(image)
        return self.segmenter.segment_everything(image, min_area=min_area)

    def segment_point(self, image, prompt):
        if self.segmenter is None:
            raise CapabilityError("sidecar victim has no segmenter")
        return self.segmenter.segment_point(image, prompt)


class PaddedVictim:
    """Adapter that reflect-pads images (bottom/right) to the encoder's
    granularity and crops every output back; pixel coordinates are
    unchanged because padding never moves the origin."""

    def __init__(self, inner, height, width):
        self.inner = inner
        self.height = height
        self.width = width
        self.pad_h = (-height) % DOWNSAMPLE
        self.pad_w = (-width) % DOWNSAMPLE

    def _pad(self, image):
        if self.pad_h == 0 and self.pad_w == 0:
            return np.asarray(image, dtype=np.float32)
        return pad_image(image, self.height + self.pad_h, self.width + self.pad_w)

    def _crop(self, mask):
        return mask[: self.height, : self.width]

    def encode(self, image):
        return self.inner.encode(self._pad(image))

    def encode_vjp(self, image, cotangent):
        g = self.inner.encode_vjp(self._pad(image), cotangent)
        return g[: self.height, : self.width]

    def segment_everything(self, image, min_area=None):
        if min_area is None:
            masks = self.inner.segment_everything(self._pad(image))
        else:
            masks = self.inner.segment_everything(self._pad(image), min_area=min_area)
        cropped = (self._crop(m) for m in masks)
        return [m for m in cropped if m.any()]

    def segment_point(self, image, prompt):
        return self._crop(self.inner.segment_point(self._pad(image), prompt))


def pad_image(image, target_h, target_w):
    """Reflect-pad an image on the bottom/right edges to the target size."""
    arr = np.asarray(image, dtype=np.float32)
    h, w, _ = arr.shape
    if target_h < h or target_w < w:
        raise ValueError(f"target {target_h}x{target_w} smaller than image {h}x{w}")
    return np.pad(arr, ((0, target_h - h), (0, target_w - w), (0, 0)), mode="reflect")
