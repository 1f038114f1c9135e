"""Secure inference for a small public-weight CNN over shared images.

Convolutions are linear maps with public weights, so they are local to each
party (zero rounds); only the activation and pooling layers interact.  The
feature vector is the channel-wise spatial mean of the last activation
stack.  Weights ship as a JSON header plus a raw little-endian float blob;
the repo uses a small randomly-initialized model with a pinned seed, since
retrieval only needs both sides to share the same extractor.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import OddSpatialDim, ShapeMismatch
from .protocols import sec_maxpool4, sec_relu, sec_sort_many
from .rng import derive_rng
from .session import PartySession

WEIGHT_MAGNITUDE_FLOOR = 2.0 ** -5


@dataclass(frozen=True)
class ConvLayer:
    weights: np.ndarray  # (out, in, kh, kw), public
    bias: np.ndarray     # (out,), public
    stride: int = 1
    pad: int = 0


@dataclass(frozen=True)
class PublicModel:
    """Ordered conv / relu / maxpool2 layers with public parameters."""

    layers: list = field(default_factory=list)  # (kind, ConvLayer | None)
    input_shape: tuple = (1, 28, 28)

    @property
    def feature_dim(self) -> int:
        out = self.input_shape[0]
        for kind, layer in self.layers:
            if kind == "conv":
                out = layer.weights.shape[0]
        return out


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    C, H, W = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    cols = np.empty((C, kh, kw, Ho, Wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = x[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
    return cols.reshape(C * kh * kw, Ho * Wo), Ho, Wo


def conv_forward(x: np.ndarray, layer: ConvLayer, bias_fraction: float = 0.5) -> np.ndarray:
    """Public-weight convolution on one party's share stack; local only.

    Each party adds ``bias_fraction`` of the public bias so the two halves
    sum to one full bias (the plaintext path passes 1.0).
    """
    x = np.asarray(x, dtype=np.float64)
    out_ch, in_ch, kh, kw = layer.weights.shape
    if x.ndim != 3 or x.shape[0] != in_ch:
        raise ShapeMismatch(f"input {x.shape} vs weights {layer.weights.shape}")
    cols, Ho, Wo = _im2col(x, kh, kw, layer.stride, layer.pad)
    out = layer.weights.reshape(out_ch, -1) @ cols
    out = out.reshape(out_ch, Ho, Wo)
    return out + bias_fraction * layer.bias[:, None, None]


def relu_forward(sess: PartySession, x: np.ndarray) -> np.ndarray:
    """Batched secure ReLU over a whole stack; three rounds per layer."""
    x = np.asarray(x, dtype=np.float64)
    return sec_relu(sess, x.ravel()).reshape(x.shape)


def _pool_lanes(x: np.ndarray):
    *lead, H, W = x.shape
    if H % 2 or W % 2:
        raise OddSpatialDim(f"pooling needs even spatial dims, got {H}x{W}")
    b = x.reshape(*lead, H // 2, 2, W // 2, 2)
    lanes = [b[..., i, :, j].ravel() for i in (0, 1) for j in (0, 1)]
    return lanes, (*lead, H // 2, W // 2)


def maxpool_forward(sess: PartySession, x: np.ndarray, mode: str = "tournament") -> np.ndarray:
    """Secure 2x2 max-pool over a stack.

    ``tournament`` (six rounds, the default) keeps only the masked
    pairwise comparisons public; ``sort`` (two rounds) reveals the masked
    in-block order instead.
    """
    x = np.asarray(x, dtype=np.float64)
    lanes, out_shape = _pool_lanes(x)
    if mode == "tournament":
        out = sec_maxpool4(sess, *lanes)
    elif mode == "sort":
        blocks = np.stack(lanes, axis=1)  # (nblocks, 4)
        results = sec_sort_many(sess, list(blocks))
        out = np.array([res.values[-1] for res in results])
    else:
        raise ValueError(f"unknown pool mode {mode!r}")
    return out.reshape(out_shape)


def aggregate_avg(x: np.ndarray) -> np.ndarray:
    """Channel-wise spatial mean; local, zero rounds."""
    x = np.asarray(x, dtype=np.float64)
    return x.mean(axis=(1, 2))


def infer(sess: PartySession, model: PublicModel, x: np.ndarray,
          pool_mode: str = "tournament") -> np.ndarray:
    """Run the full extractor over one party's image share.

    Interaction cost is the sum of the per-layer contracts: zero for conv,
    three rounds per ReLU layer, six (or two in sort mode) per pool layer.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != model.input_shape:
        raise ShapeMismatch(f"image {x.shape} vs model input {model.input_shape}")
    for kind, layer in model.layers:
        if kind == "conv":
            x = conv_forward(x, layer, bias_fraction=0.5)
        elif kind == "relu":
            x = relu_forward(sess, x)
        elif kind == "maxpool2":
            x = maxpool_forward(sess, x, mode=pool_mode)
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    feature = aggregate_avg(x)
    assert feature.shape == (model.feature_dim,)
    return feature


def infer_batch(sess: PartySession, model: PublicModel, images: np.ndarray,
                pool_mode: str = "tournament") -> np.ndarray:
    """Extract features for many image shares with shared rounds.

    All images ride the same activation and pooling frames (data
    parallelism inside a round), so a whole corpus costs the same
    interaction depth as a single inference.  Returns (n, feature_dim).
    """
    x = np.asarray(images, dtype=np.float64)
    if x.ndim != 4 or x.shape[1:] != model.input_shape:
        raise ShapeMismatch(f"batch {x.shape} vs model input {model.input_shape}")
    for kind, layer in model.layers:
        if kind == "conv":
            x = np.stack([conv_forward(img, layer, bias_fraction=0.5) for img in x])
        elif kind == "relu":
            x = sec_relu(sess, x.ravel()).reshape(x.shape)
        elif kind == "maxpool2":
            lanes, out_shape = _pool_lanes(x)
            if pool_mode == "tournament":
                x = sec_maxpool4(sess, *lanes).reshape(out_shape)
            else:
                blocks = np.stack(lanes, axis=1)
                results = sec_sort_many(sess, list(blocks))
                x = np.array([res.values[-1] for res in results]).reshape(out_shape)
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    return x.mean(axis=(2, 3))


def plaintext_infer(model: PublicModel, image: np.ndarray) -> np.ndarray:
    """Reference forward pass on plaintext pixels (the oracle route)."""
    x = np.asarray(image, dtype=np.float64)
    for kind, layer in model.layers:
        if kind == "conv":
            x = conv_forward(x, layer, bias_fraction=1.0)
        elif kind == "relu":
            x = np.maximum(x, 0.0)
        elif kind == "maxpool2":
            C, H, W = x.shape
            if H % 2 or W % 2:
                raise OddSpatialDim(f"pooling needs even spatial dims, got {H}x{W}")
            x = x.reshape(C, H // 2, 2, W // 2, 2).max(axis=(2, 4))
    return aggregate_avg(x)


def infer_round_formula(model: PublicModel, pool_mode: str = "tournament") -> dict[str, int]:
    """Analytic per-tag interaction rounds for one inference."""
    relu_layers = sum(1 for kind, _ in model.layers if kind == "relu")
    pool_layers = sum(1 for kind, _ in model.layers if kind == "maxpool2")
    rounds = {"sec_relu": 3 * relu_layers}
    if pool_mode == "tournament":
        rounds["sec_maxpool"] = 6 * pool_layers
    else:
        rounds["sec_sort"] = 2 * pool_layers
    return rounds


# -- model construction and validation ---------------------------------------


def make_demo_model(seed: int = 0, in_channels: int = 1, widths=(8, 32),
                    ksize: int = 3, input_hw: int = 28) -> PublicModel:
    """Small two-stage extractor with magnitudes tuned to the share range.

    Weight and bias magnitudes stay clear of both the 2^-5 small-constant
    floor and (for in-range inputs) zero pre-activations.
    """
    rng = derive_rng(seed, "demo-model")
    layers = []
    ch = in_channels
    for stage, width in enumerate(widths):
        hi = 0.6 / (1 + 3 * stage)
        lo = hi / 6.0
        w = rng.choice([-1.0, 1.0], size=(width, ch, ksize, ksize)) * rng.uniform(
            lo + WEIGHT_MAGNITUDE_FLOOR, hi, size=(width, ch, ksize, ksize))
        b = rng.choice([-1.0, 1.0], size=width) * rng.uniform(0.05, 0.25, size=width)
        layers.append(("conv", ConvLayer(w, b, stride=1, pad=ksize // 2)))
        layers.append(("relu", None))
        layers.append(("maxpool2", None))
        ch = width
    return PublicModel(layers, (in_channels, input_hw, input_hw))


def validate_model(model: PublicModel, secret_hi: float | None = None) -> list[str]:
    """Report (and warn about) suspicious public parameters.

    Wholly tiny filters risk underflowing shares during the constant
    multiplication; magnitudes beyond the secret cap cannot be split.
    """
    findings = []
    for idx, (kind, layer) in enumerate(model.layers):
        if kind != "conv":
            continue
        for f_idx in range(layer.weights.shape[0]):
            fmax = float(np.max(np.abs(layer.weights[f_idx])))
            if fmax < WEIGHT_MAGNITUDE_FLOOR:
                findings.append(
                    f"layer {idx} filter {f_idx}: all weights below {WEIGHT_MAGNITUDE_FLOOR}")
        if secret_hi is not None:
            top = max(float(np.max(np.abs(layer.weights))),
                      float(np.max(np.abs(layer.bias))))
            if top > secret_hi:
                findings.append(f"layer {idx}: parameter magnitude {top} above secret cap")
    for msg in findings:
        warnings.warn(msg, stacklevel=2)
    return findings


def screen_activations(model: PublicModel, images, eta: float) -> list[tuple[int, int, int]]:
    """Count plaintext pre-activation magnitudes inside (0, eta].

    Comparisons whose true gap lies in that window may resolve either way
    under the comparison mask; the report lists (image index, layer index,
    count) so corpora can be screened before relying on oracle equality.
    """
    violations = []
    for img_idx, image in enumerate(np.asarray(images, dtype=np.float64)):
        x = image
        for layer_idx, (kind, layer) in enumerate(model.layers):
            if kind == "conv":
                x = conv_forward(x, layer, bias_fraction=1.0)
                mags = np.abs(x)
                count = int(np.sum((mags > 0) & (mags <= eta)))
                if count:
                    violations.append((img_idx, layer_idx, count))
            elif kind == "relu":
                x = np.maximum(x, 0.0)
            elif kind == "maxpool2":
                C, H, W = x.shape
                b = x.reshape(C, H // 2, 2, W // 2, 2)
                l1, l2 = b[:, :, 0, :, 0], b[:, :, 0, :, 1]
                l3, l4 = b[:, :, 1, :, 0], b[:, :, 1, :, 1]
                gaps = np.concatenate([
                    np.abs(l1 - l2).ravel(), np.abs(l3 - l4).ravel(),
                    np.abs(np.maximum(l1, l2) - np.maximum(l3, l4)).ravel()])
                count = int(np.sum((gaps > 0) & (gaps <= eta)))
                if count:
                    violations.append((img_idx, layer_idx, count))
                x = b.max(axis=(2, 4))
    return violations


# -- model files ------------------------------------------------------------


def save_model(model: PublicModel, json_path, bin_path) -> None:
    header = {"input_shape": list(model.input_shape), "layers": []}
    blob = bytearray()
    for kind, layer in model.layers:
        if kind == "conv":
            header["layers"].append({
                "type": "conv",
                "weights": list(layer.weights.shape),
                "stride": layer.stride,
                "pad": layer.pad,
            })
            blob += np.ascontiguousarray(layer.weights, dtype="<f8").tobytes()
            blob += np.ascontiguousarray(layer.bias, dtype="<f8").tobytes()
        else:
            header["layers"].append({"type": kind})
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(header, fh, indent=1)
    with open(bin_path, "wb") as fh:
        fh.write(bytes(blob))


def load_model(json_path, bin_path) -> PublicModel:
    with open(json_path, encoding="utf-8") as fh:
        header = json.load(fh)
    raw = np.fromfile(bin_path, dtype="<f8")
    layers = []
    offset = 0
    for spec in header["layers"]:
        if spec["type"] == "conv":
            shape = tuple(spec["weights"])
            n_w = int(np.prod(shape))
            w = raw[offset:offset + n_w].reshape(shape)
            offset += n_w
            b = raw[offset:offset + shape[0]]
            offset += shape[0]
            layers.append(("conv", ConvLayer(w.copy(), b.copy(),
                                             spec["stride"], spec["pad"])))
        else:
            layers.append((spec["type"], None))
    return PublicModel(layers, tuple(header["input_shape"]))
