"""A small UNET with hand-written reverse-mode gradients.

The graph is fixed: one encoder (two 2x2 max-pool stages) feeding any number
of decoders that unpool with the encoder's stored indices and take skip
connections from it. All tensors are single samples of shape ``(C, H, W)``.

Parameters live in a flat ``dict`` keyed ``"<prefix>.<layer>.w"`` /
``".b"``. Prefix ``enc`` is the shared encoder, ``rec`` the reconstruction
decoder and ``seg`` the segmentation decoder. A cascade model adds ``senc``,
an independent segmentation encoder.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ENCODER_LAYERS = ("conv1a", "conv1b", "conv2a", "conv2b", "conv3a", "conv3b")
DECODER_LAYERS = ("up2", "dec2", "up1", "dec1", "out")


# ---------------------------------------------------------------------------
# primitive layers


def conv3x3(x, w, b, relu=True):
    """Zero-padded stride-1 3x3 convolution (cross-correlation) + optional ReLU."""
    c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    cols = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (C, H, W, 3, 3)
    cols = np.ascontiguousarray(cols.transpose(0, 3, 4, 1, 2)).reshape(c * 9, h * wd)
    y = (w.reshape(w.shape[0], -1) @ cols).reshape(-1, h, wd) + b[:, None, None]
    active = None
    if relu:
        active = y > 0
        y = y * active
    return y, (cols, x.shape, active)


def conv3x3_backward(g, cache, w):
    cols, xshape, active = cache
    c, h, wd = xshape
    if active is not None:
        g = g * active
    g2 = g.reshape(g.shape[0], -1)
    gw = (g2 @ cols.T).reshape(w.shape)
    gb = g2.sum(axis=1)
    gcols = (w.reshape(w.shape[0], -1).T @ g2).reshape(c, 3, 3, h, wd)
    gxp = np.zeros((c, h + 2, wd + 2), dtype=g.dtype)
    for dy in range(3):
        for dx in range(3):
            gxp[:, dy:dy + h, dx:dx + wd] += gcols[:, dy, dx]
    return gxp[:, 1:-1, 1:-1], gw, gb


def conv1x1(x, w, b):
    c, h, wd = x.shape
    y = (w.reshape(w.shape[0], c) @ x.reshape(c, -1)).reshape(-1, h, wd)
    return y + b[:, None, None], x


def conv1x1_backward(g, x, w):
    c = x.shape[0]
    g2 = g.reshape(g.shape[0], -1)
    gw = (g2 @ x.reshape(c, -1).T).reshape(w.shape)
    gx = (w.reshape(w.shape[0], c).T @ g2).reshape(x.shape)
    return gx, gw, g2.sum(axis=1)


def maxpool2(x):
    """2x2 max-pool; returns the pooled map and the argmax index per window.

    Ties resolve to the first element in row-major window order.
    """
    c, h, w = x.shape
    win = x.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)
    idx = np.argmax(win, axis=-1)
    return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0], idx


def unpool2(y, idx):
    """Place each value at its stored max position; other positions are 0."""
    c, h2, w2 = y.shape
    out = np.zeros((c, h2, w2, 4), dtype=y.dtype)
    np.put_along_axis(out, idx[..., None], y[..., None], axis=-1)
    return out.reshape(c, h2, w2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, 2 * h2, 2 * w2)


def maxpool2_backward(g, idx):
    return unpool2(g, idx)


def unpool2_backward(g, idx):
    c, h, w = g.shape
    win = g.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)
    return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]


def softmax(logits):
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def softmax_backward(g, p):
    return p * (g - np.sum(g * p, axis=0, keepdims=True))


# ---------------------------------------------------------------------------
# complex <-> real channels


def complex_to_channels(gamma):
    """``(N, H, W)`` complex -> ``(2N, H, W)`` real, interleaved re/im."""
    gamma = np.asarray(gamma)
    out = np.empty((2 * gamma.shape[0],) + gamma.shape[1:], dtype=gamma.real.dtype)
    out[0::2] = gamma.real
    out[1::2] = gamma.imag
    return out


def channels_to_complex(x):
    x = np.asarray(x)
    if x.shape[0] % 2:
        raise ValueError(f"channel count must be even, got {x.shape[0]}")
    return x[0::2] + 1j * x[1::2]


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class NetConfig:
    """Widths of the mini-UNET: ``width -> 2 width -> 4 width`` channels."""

    coils: int = 4
    width: int = 16
    classes: int = 4


def encoder_shapes(prefix, cin, width):
    chans = [(cin, width), (width, width), (width, 2 * width),
             (2 * width, 2 * width), (2 * width, 4 * width), (4 * width, 4 * width)]
    return {f"{prefix}.{name}": (o, i, 3, 3) for name, (i, o) in zip(ENCODER_LAYERS, chans)}


def decoder_shapes(prefix, width, cout):
    return {
        f"{prefix}.up2": (2 * width, 4 * width, 3, 3),
        f"{prefix}.dec2": (2 * width, 4 * width, 3, 3),
        f"{prefix}.up1": (width, 2 * width, 3, 3),
        f"{prefix}.dec1": (width, 2 * width, 3, 3),
        f"{prefix}.out": (cout, width, 1, 1),
    }


def xavier_init(shapes: dict, seed=0, dtype=np.float64):
    """Xavier-uniform weights and zero biases.

    Each layer draws from its own generator keyed by ``(seed, layer name)``,
    so a layer's initial weights do not depend on which other layers exist.
    """
    params = {}
    for name, shape in shapes.items():
        fan_out, fan_in = shape[0] * shape[2] * shape[3], shape[1] * shape[2] * shape[3]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        params[f"{name}.w"] = rng.uniform(-limit, limit, size=shape).astype(dtype)
        params[f"{name}.b"] = np.zeros(shape[0], dtype=dtype)
    return params


def parameter_count(params, prefix=None):
    return int(sum(v.size for k, v in params.items()
                   if prefix is None or k.startswith(prefix + ".")))


def group_of(name):
    return name.split(".", 1)[0]


# ---------------------------------------------------------------------------
# encoder / decoder


@dataclass
class Activations:
    """Cached encoder state: features, pooling indices and layer caches."""

    skip1: np.ndarray
    skip2: np.ndarray
    bottleneck: np.ndarray
    idx1: np.ndarray
    idx2: np.ndarray
    caches: dict = field(default_factory=dict)
    prefix: str = "enc"


def encoder_forward(x, params, prefix="enc"):
    """Run the encoder on ``x`` of shape ``(C, H, W)``; H and W divisible by 4."""
    if x.shape[1] % 4 or x.shape[2] % 4:
        raise ValueError(f"image size {x.shape[1:]} must be divisible by 4")
    p = params
    caches = {}

    def conv(name, inp):
        y, caches[name] = conv3x3(inp, p[f"{prefix}.{name}.w"], p[f"{prefix}.{name}.b"])
        return y

    s1 = conv("conv1b", conv("conv1a", x))
    h, idx1 = maxpool2(s1)
    s2 = conv("conv2b", conv("conv2a", h))
    h, idx2 = maxpool2(s2)
    bott = conv("conv3b", conv("conv3a", h))
    return Activations(s1, s2, bott, idx1, idx2, caches, prefix)


def encoder_backward(g_skip1, g_skip2, g_bott, acts: Activations, params):
    """Backpropagate feature gradients to the encoder input and weights."""
    prefix = acts.prefix
    grads = {}

    def back(name, g):
        gx, grads[f"{prefix}.{name}.w"], grads[f"{prefix}.{name}.b"] = conv3x3_backward(
            g, acts.caches[name], params[f"{prefix}.{name}.w"])
        return gx

    g = back("conv3a", back("conv3b", g_bott))
    g = maxpool2_backward(g, acts.idx2) + g_skip2
    g = back("conv2a", back("conv2b", g))
    g = maxpool2_backward(g, acts.idx1) + g_skip1
    g = back("conv1a", back("conv1b", g))
    return g, grads


def decoder_forward(acts: Activations, params, prefix):
    """Decoder with unpooling and skip connections; returns raw outputs."""
    p = params
    caches = {}

    def conv(name, inp):
        y, caches[name] = conv3x3(inp, p[f"{prefix}.{name}.w"], p[f"{prefix}.{name}.b"])
        return y

    h = unpool2(conv("up2", acts.bottleneck), acts.idx2)
    h = conv("dec2", np.concatenate([h, acts.skip2]))
    h = unpool2(conv("up1", h), acts.idx1)
    h = conv("dec1", np.concatenate([h, acts.skip1]))
    out, caches["out"] = conv1x1(h, p[f"{prefix}.out.w"], p[f"{prefix}.out.b"])
    return out, caches


def decoder_backward(g_out, caches, acts: Activations, params, prefix):
    """Returns ``(g_skip1, g_skip2, g_bottleneck, grads)``."""
    grads = {}

    def back(name, g):
        gx, grads[f"{prefix}.{name}.w"], grads[f"{prefix}.{name}.b"] = conv3x3_backward(
            g, caches[name], params[f"{prefix}.{name}.w"])
        return gx

    g, grads[f"{prefix}.out.w"], grads[f"{prefix}.out.b"] = conv1x1_backward(
        g_out, caches["out"], params[f"{prefix}.out.w"])
    g = back("dec1", g)
    c1 = g.shape[0] - acts.skip1.shape[0]
    g, g_skip1 = g[:c1], g[c1:]
    g = back("up1", unpool2_backward(g, acts.idx1))
    g = back("dec2", g)
    c2 = g.shape[0] - acts.skip2.shape[0]
    g, g_skip2 = g[:c2], g[c2:]
    g_bott = back("up2", unpool2_backward(g, acts.idx2))
    return g_skip1, g_skip2, g_bott, grads


# ---------------------------------------------------------------------------
# denoiser and segmentation head


def init_params(cfg: NetConfig, seed=0, dtype=np.float64, segmentation=True):
    shapes = encoder_shapes("enc", 2 * cfg.coils, cfg.width)
    shapes.update(decoder_shapes("rec", cfg.width, 2 * cfg.coils))
    if segmentation:
        shapes.update(decoder_shapes("seg", cfg.width, cfg.classes))
    return xavier_init(shapes, seed, dtype)


@dataclass
class DenoiserCache:
    acts: Activations
    rec_caches: dict


def denoiser_forward(gamma, params):
    """``z = gamma - N(gamma)`` with ``N`` the encoder + reconstruction decoder.

    Computation runs in the dtype of the parameters.
    """
    dtype = params["enc.conv1a.w"].dtype
    x = complex_to_channels(gamma).astype(dtype, copy=False)
    if x.shape[0] != params["enc.conv1a.w"].shape[1]:
        raise ValueError(
            f"network expects {params['enc.conv1a.w'].shape[1] // 2} coils, got {x.shape[0] // 2}")
    acts = encoder_forward(x, params, "enc")
    out, rec_caches = decoder_forward(acts, params, "rec")
    z = gamma - channels_to_complex(out)
    return z, DenoiserCache(acts, rec_caches)


def denoiser_backward(g_z, cache: DenoiserCache, params, extra_feature_grads=None):
    """Reverse pass of :func:`denoiser_forward`.

    ``g_z`` is the gradient with respect to ``z`` in the real convention
    ``dL/dRe + i dL/dIm``. ``extra_feature_grads`` are gradients arriving at
    the encoder features from another decoder (the segmentation head).
    Returns ``(g_gamma, grads)``.
    """
    g_out = -complex_to_channels(g_z)
    g1, g2, g3, grads = decoder_backward(g_out, cache.rec_caches, cache.acts, params, "rec")
    if extra_feature_grads is not None:
        e1, e2, e3 = extra_feature_grads
        g1, g2, g3 = g1 + e1, g2 + e2, g3 + e3
    g_x, enc_grads = encoder_backward(g1, g2, g3, cache.acts, params)
    grads.update(enc_grads)
    return g_z + channels_to_complex(g_x), grads


def seg_forward(acts: Activations, params, prefix="seg"):
    """Class probabilities ``(C, H, W)`` from encoder activations."""
    logits, caches = decoder_forward(acts, params, prefix)
    return softmax(logits), caches


def seg_backward(g_probs, probs, caches, acts: Activations, params, prefix="seg"):
    """Returns ``((g_skip1, g_skip2, g_bottleneck), grads)``."""
    g_logits = softmax_backward(g_probs, probs)
    g1, g2, g3, grads = decoder_backward(g_logits, caches, acts, params, prefix)
    return (g1, g2, g3), grads
