"""Gated current/prior feature fusion with analytic gradients.

The block takes the current BEV feature F_c and an aligned prior feature F_p
and combines them through two parallel branches:

    F_p   = align(prior)                      1x1 channel projection
    F_cat = w1(concat(F_c, F_p))
    F_add = w2(F_c + F_p)
    alpha = sigmoid(w3(concat(F_cat, F_add)))
    F_agg = alpha * F_c + (1 - alpha) * F_p

All convolutions are stride-1, same-padded cross-correlations in float64.
Backward passes are exact reverse-mode derivatives, so the gate is trainable
with plain gradient descent at desk scale.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .grid import FeatureGrid
from .validation import check_finite

__all__ = [
    "ConvLayer",
    "FusionWeights",
    "FusionOutput",
    "FusionGrads",
    "LayerGrads",
    "conv2d",
    "fuse",
    "fuse_backward",
    "train_step",
    "init_weights",
    "save_weights",
    "load_weights",
]

# Row block bounding im2col scratch memory for large planes.
_BLOCK_ELEMS = 8_000_000


@dataclass
class ConvLayer:
    """Stride-1 same-padded cross-correlation; kernel (out_ch, in_ch, kh, kw), bias (out_ch,)."""

    kernel: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.kernel = np.ascontiguousarray(self.kernel, dtype=np.float64)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
        if self.kernel.ndim != 4:
            raise ValueError("kernel must be (out_ch, in_ch, kh, kw)")
        if self.kernel.shape[2] % 2 == 0 or self.kernel.shape[3] % 2 == 0:
            raise ValueError("kernel height/width must be odd for same padding")
        if self.bias.shape != (self.kernel.shape[0],):
            raise ValueError("bias length must equal out_ch")
        check_finite(self.kernel, "kernel")
        check_finite(self.bias, "bias")

    @property
    def out_ch(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_ch(self) -> int:
        return self.kernel.shape[1]

    def copy(self) -> "ConvLayer":
        return ConvLayer(self.kernel.copy(), self.bias.copy())


class LayerGrads(NamedTuple):
    kernel: np.ndarray
    bias: np.ndarray


@dataclass
class FusionWeights:
    """The four fusion convolutions plus an optional 1x1 decode head for training harnesses."""

    align: ConvLayer
    w1: ConvLayer
    w2: ConvLayer
    w3: ConvLayer
    decode: ConvLayer | None = None

    def __post_init__(self):
        c = self.align.out_ch
        if self.w1.in_ch != 2 * c or self.w2.in_ch != c or self.w3.in_ch != 2 * c:
            raise ValueError("fusion channel wiring inconsistent: need w1/w3 in 2C, w2 in C")
        if not (self.w1.out_ch == self.w2.out_ch == self.w3.out_ch == c):
            raise ValueError("w1, w2, w3 must all produce C channels")
        if self.decode is not None and self.decode.in_ch != c:
            raise ValueError("decode head must consume C channels")

    @property
    def channels(self) -> int:
        return self.align.out_ch

    @property
    def prior_channels(self) -> int:
        return self.align.in_ch

    def copy(self) -> "FusionWeights":
        return FusionWeights(
            self.align.copy(),
            self.w1.copy(),
            self.w2.copy(),
            self.w3.copy(),
            None if self.decode is None else self.decode.copy(),
        )


@dataclass
class FusionGrads:
    align: LayerGrads
    w1: LayerGrads
    w2: LayerGrads
    w3: LayerGrads


@dataclass
class _Saved:
    f_c: np.ndarray
    prior_raw: np.ndarray
    f_p: np.ndarray
    x1: np.ndarray
    x2: np.ndarray
    x3: np.ndarray


@dataclass
class FusionOutput:
    """Fused feature, the gate, and the intermediates needed by the backward pass."""

    f_agg: FeatureGrid
    alpha: FeatureGrid
    saved: _Saved | None = None


def _conv_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    h, w, cin = x.shape
    co, ci, kh, kw = layer.kernel.shape
    if cin != ci:
        raise ValueError(f"input has {cin} channels, layer expects {ci}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((ph, ph), (pw, pw), (0, 0)))
    wmat = layer.kernel.transpose(0, 2, 3, 1).reshape(co, kh * kw * ci)
    out = np.empty((h, w, co), dtype=np.float64)
    block = max(1, _BLOCK_ELEMS // (kh * kw * ci * w))
    for h0 in range(0, h, block):
        h1 = min(h0 + block, h)
        cols = _im2col(xp[h0 : h1 + kh - 1], h1 - h0, w, kh, kw)
        out[h0:h1] = (cols @ wmat.T).reshape(h1 - h0, w, co)
    out += layer.bias
    return out


def _im2col(xp: np.ndarray, h: int, w: int, kh: int, kw: int) -> np.ndarray:
    ci = xp.shape[2]
    cols = np.empty((h, w, kh * kw, ci), dtype=xp.dtype)
    n = 0
    for dy in range(kh):
        for dx in range(kw):
            cols[:, :, n, :] = xp[dy : dy + h, dx : dx + w, :]
            n += 1
    return cols.reshape(h * w, kh * kw * ci)


def _conv_backward(g: np.ndarray, x: np.ndarray, layer: ConvLayer) -> tuple[np.ndarray, LayerGrads]:
    h, w, cin = x.shape
    co, ci, kh, kw = layer.kernel.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((ph, ph), (pw, pw), (0, 0)))
    wmat = layer.kernel.transpose(0, 2, 3, 1).reshape(co, kh * kw * ci)
    d_wmat = np.zeros_like(wmat)
    d_xp = np.zeros_like(xp)
    block = max(1, _BLOCK_ELEMS // (kh * kw * ci * w))
    for h0 in range(0, h, block):
        h1 = min(h0 + block, h)
        hb = h1 - h0
        cols = _im2col(xp[h0 : h1 + kh - 1], hb, w, kh, kw)
        gb = g[h0:h1].reshape(hb * w, co)
        d_wmat += gb.T @ cols
        d_cols = (gb @ wmat).reshape(hb, w, kh * kw, ci)
        n = 0
        for dy in range(kh):
            for dx in range(kw):
                d_xp[h0 + dy : h1 + dy, dx : dx + w, :] += d_cols[:, :, n, :]
                n += 1
    d_x = d_xp[ph : ph + h, pw : pw + w, :]
    d_kernel = d_wmat.reshape(co, kh, kw, ci).transpose(0, 3, 1, 2)
    d_bias = g.sum(axis=(0, 1))
    return np.ascontiguousarray(d_x), LayerGrads(np.ascontiguousarray(d_kernel), d_bias)


def conv2d(feat: FeatureGrid, layer: ConvLayer) -> FeatureGrid:
    """Same-padded stride-1 cross-correlation plus bias."""
    return FeatureGrid(_conv_forward(feat.values, layer))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def fuse(f_c: FeatureGrid, prior_logits_bev: FeatureGrid | None, weights: FusionWeights) -> FusionOutput:
    """Forward pass of the gated fusion; ``None`` prior stands for an all-zeros prior feature."""
    fc = f_c.values
    c = weights.channels
    if fc.shape[2] != c:
        raise ValueError(f"current feature has {fc.shape[2]} channels, weights expect {c}")
    if prior_logits_bev is None:
        prior_raw = np.zeros((fc.shape[0], fc.shape[1], weights.prior_channels))
    else:
        prior_raw = prior_logits_bev.values
        if prior_raw.shape[:2] != fc.shape[:2]:
            raise ValueError("current and prior planes differ in height/width")
        if prior_raw.shape[2] != weights.prior_channels:
            raise ValueError(
                f"prior has {prior_raw.shape[2]} channels, weights expect {weights.prior_channels}"
            )
    f_p = _conv_forward(prior_raw, weights.align)
    x1 = np.concatenate([fc, f_p], axis=2)
    f_cat = _conv_forward(x1, weights.w1)
    x2 = fc + f_p
    f_add = _conv_forward(x2, weights.w2)
    x3 = np.concatenate([f_cat, f_add], axis=2)
    alpha = _sigmoid(_conv_forward(x3, weights.w3))
    f_agg = alpha * fc + (1.0 - alpha) * f_p
    saved = _Saved(f_c=fc, prior_raw=prior_raw, f_p=f_p, x1=x1, x2=x2, x3=x3)
    return FusionOutput(f_agg=FeatureGrid(f_agg), alpha=FeatureGrid(alpha), saved=saved)


def fuse_backward(
    output_grad: FeatureGrid, out: FusionOutput, weights: FusionWeights
) -> tuple[FusionGrads, np.ndarray, np.ndarray]:
    """Exact reverse-mode gradients of :func:`fuse`.

    Returns (per-layer gradients, grad wrt the current feature, grad wrt the
    raw prior plane).
    """
    if out.saved is None:
        raise ValueError("fusion output is missing saved intermediates")
    s = out.saved
    g = output_grad.values
    alpha = out.alpha.values
    c = weights.channels

    d_alpha = g * (s.f_c - s.f_p)
    d_fc = g * alpha
    d_fp = g * (1.0 - alpha)

    d_pre = d_alpha * alpha * (1.0 - alpha)
    d_x3, g_w3 = _conv_backward(d_pre, s.x3, weights.w3)
    d_fcat = d_x3[:, :, :c]
    d_fadd = d_x3[:, :, c:]

    d_x2, g_w2 = _conv_backward(d_fadd, s.x2, weights.w2)
    d_fc = d_fc + d_x2
    d_fp = d_fp + d_x2

    d_x1, g_w1 = _conv_backward(d_fcat, s.x1, weights.w1)
    d_fc = d_fc + d_x1[:, :, :c]
    d_fp = d_fp + d_x1[:, :, c:]

    d_prior, g_align = _conv_backward(np.ascontiguousarray(d_fp), s.prior_raw, weights.align)
    grads = FusionGrads(align=g_align, w1=g_w1, w2=g_w2, w3=g_w3)
    return grads, d_fc, d_prior


def init_weights(c: int, prior_ch: int, seed: int, decode_ch: int | None = None) -> FusionWeights:
    """Seed-deterministic uniform init in +-sqrt(1/(in_ch*kh*kw)), zero biases.

    ``decode_ch`` sizes the trainable 1x1 decode head; it defaults to
    ``prior_ch`` (features back to BEV-flattened logits).
    """
    if c < 1 or prior_ch < 1:
        raise ValueError("channel counts must be >= 1")
    rng = np.random.default_rng(seed)

    def layer(out_ch: int, in_ch: int, k: int) -> ConvLayer:
        bound = np.sqrt(1.0 / (in_ch * k * k))
        kernel = rng.uniform(-bound, bound, size=(out_ch, in_ch, k, k))
        return ConvLayer(kernel, np.zeros(out_ch))

    return FusionWeights(
        align=layer(c, prior_ch, 1),
        w1=layer(c, 2 * c, 3),
        w2=layer(c, c, 3),
        w3=layer(c, 2 * c, 3),
        decode=layer(prior_ch if decode_ch is None else decode_ch, c, 1),
    )


def _softmax_ce(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over all voxels; logits (H, W, Z, N), labels (H, W, Z)."""
    m = logits.max(axis=-1, keepdims=True)
    ex = np.exp(logits - m)
    se = ex.sum(axis=-1, keepdims=True)
    logp = (logits - m) - np.log(se)
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)
    n = labels.size
    loss = -float(picked.sum()) / n
    grad = ex / se
    np.subtract.at(grad.reshape(-1, grad.shape[-1]), (np.arange(n), labels.ravel()), 1.0)
    return loss, grad / n


def _target_labels(target_logits: np.ndarray, n_classes: int) -> np.ndarray:
    """Per-voxel argmax of BEV-flattened target logits (H, W, Z*N) -> (H, W, Z)."""
    h, w, zn = target_logits.shape
    z = zn // n_classes
    return np.argmax(target_logits.reshape(h, w, z, n_classes), axis=-1)


def train_step(
    batch: Sequence[tuple[FeatureGrid, FeatureGrid | None, FeatureGrid]],
    weights: FusionWeights,
    lr: float,
    n_classes: int,
) -> tuple[FusionWeights, float]:
    """One full-batch gradient-descent step on mean per-voxel cross-entropy.

    Batch items are (current feature, prior plane or None, target logits in
    BEV-flattened form); the decode head turns fused features back into
    logits. Returns the updated weights and the pre-step loss.
    """
    if lr < 0:
        raise ValueError("lr must be >= 0")
    if weights.decode is None:
        raise ValueError("training requires a decode head")
    if not batch:
        raise ValueError("empty batch")

    acc = {
        name: (np.zeros_like(layer.kernel), np.zeros_like(layer.bias))
        for name, layer in (
            ("align", weights.align),
            ("w1", weights.w1),
            ("w2", weights.w2),
            ("w3", weights.w3),
            ("decode", weights.decode),
        )
    }
    total_loss = 0.0
    for f_c, prior, target in batch:
        out = fuse(f_c, prior, weights)
        logits_bev = _conv_forward(out.f_agg.values, weights.decode)
        h, w, zn = logits_bev.shape
        z = zn // n_classes
        labels = _target_labels(target.values, n_classes)
        loss, d_logits4 = _softmax_ce(logits_bev.reshape(h, w, z, n_classes), labels)
        total_loss += loss
        d_logits = d_logits4.reshape(h, w, zn)
        d_agg, g_decode = _conv_backward(d_logits, out.f_agg.values, weights.decode)
        grads, _, _ = fuse_backward(FeatureGrid(d_agg), out, weights)
        for name, lg in (
            ("align", grads.align),
            ("w1", grads.w1),
            ("w2", grads.w2),
            ("w3", grads.w3),
            ("decode", g_decode),
        ):
            k_acc, b_acc = acc[name]
            k_acc += lg.kernel
            b_acc += lg.bias

    scale = lr / len(batch)
    new = weights.copy()
    for name, layer in (
        ("align", new.align),
        ("w1", new.w1),
        ("w2", new.w2),
        ("w3", new.w3),
        ("decode", new.decode),
    ):
        k_acc, b_acc = acc[name]
        layer.kernel -= scale * k_acc
        layer.bias -= scale * b_acc
    loss = total_loss / len(batch)
    if not np.isfinite(loss):
        raise FloatingPointError(f"training diverged: loss = {loss}")
    return new, loss


_WEIGHTS_MAGIC = b"LMPW"
_WEIGHTS_VERSION = 1


def save_weights(weights: FusionWeights, path) -> None:
    """Binary checkpoint: named float64 tensor records, each CRC-32 protected."""
    records: list[tuple[str, np.ndarray]] = []
    layers = [("align", weights.align), ("w1", weights.w1), ("w2", weights.w2), ("w3", weights.w3)]
    if weights.decode is not None:
        layers.append(("decode", weights.decode))
    for name, layer in layers:
        records.append((f"{name}.kernel", layer.kernel))
        records.append((f"{name}.bias", layer.bias))
    with open(path, "wb") as f:
        f.write(_WEIGHTS_MAGIC)
        f.write(struct.pack("<IQ", _WEIGHTS_VERSION, len(records)))
        for name, arr in records:
            blob = name.encode("utf-8")
            payload = struct.pack("<H", len(blob)) + blob + struct.pack("<B", arr.ndim)
            payload += struct.pack(f"<{arr.ndim}I", *arr.shape)
            payload += np.ascontiguousarray(arr, dtype="<f8").tobytes()
            f.write(payload)
            f.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def load_weights(path) -> FusionWeights:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _WEIGHTS_MAGIC:
        raise ValueError("not a fusion weights checkpoint")
    version, n_records = struct.unpack_from("<IQ", data, 4)
    if version != _WEIGHTS_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 16
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_records):
        start = pos
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += 8 * count
        (crc,) = struct.unpack_from("<I", data, pos)
        if zlib.crc32(data[start:pos]) & 0xFFFFFFFF != crc:
            raise ValueError(f"checkpoint record {name!r} failed its integrity check")
        pos += 4
        tensors[name] = arr.copy()

    def layer(name: str) -> ConvLayer:
        return ConvLayer(tensors[f"{name}.kernel"], tensors[f"{name}.bias"])

    decode = layer("decode") if "decode.kernel" in tensors else None
    return FusionWeights(layer("align"), layer("w1"), layer("w2"), layer("w3"), decode)
