"""Unrolled image-domain network with a joint segmentation head.

Each of the ``K`` iterations applies the residual denoiser
``z_n = gamma_n - N(gamma_n)`` and then the data-consistency solve. One
parameter dict is shared by all iterations. The segmentation decoder reads
the encoder features of the last iteration (``joint``), or an independent
UNET reads the sum-of-squares output (``cascade``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .fourier import apply_adjoint, dc_jacobian, dc_solve
from .phantom import normalize, sos
from .tensors_io import NUM_CLASSES, Dataset, RunConfig, load_checkpoint, save_checkpoint

MODES = ("joint", "cascade", "recon-only")
PROB_FLOOR = 1e-12


class TrainingDiverged(RuntimeError):
    """The training loss became non-finite."""


@dataclass
class UnrolledModel:
    params: dict
    unrolls: int = 3
    lam: float = 100.0
    mode: str = "joint"
    coils: int = 4
    width: int = 16
    seg_width: int | None = None
    classes: int = NUM_CLASSES

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.lam > 0:
            raise ValueError("lam must be > 0")
        if self.unrolls < 0:
            raise ValueError("unrolls must be >= 0")

    @property
    def dtype(self):
        return self.params["enc.conv1a.w"].dtype

    @property
    def has_segmentation(self):
        return self.mode != "recon-only"

    def parameter_count(self, group=None):
        return nn.parameter_count(self.params, group)

    def meta(self):
        return {
            "unrolls": self.unrolls, "lam": self.lam, "mode": self.mode,
            "coils": self.coils, "width": self.width, "seg_width": self.seg_width,
            "classes": self.classes, "dtype": str(self.dtype),
        }


def _cascade_seg_shapes(width, classes):
    shapes = nn.encoder_shapes("senc", 1, width)
    shapes.update(nn.decoder_shapes("seg", width, classes))
    return shapes


def _count(shapes):
    return sum(math.prod(s) + s[0] for s in shapes.values())


def matched_cascade_width(coils=4, width=16, classes=NUM_CLASSES):
    """Segmentation-UNET width whose parameter count best matches the
    shared model's segmentation decoder, so both models have about the same
    total size."""
    target = _count(nn.decoder_shapes("seg", width, classes))
    return min(range(1, 4 * width + 1),
               key=lambda w: abs(_count(_cascade_seg_shapes(w, classes)) - target))


def build_model(mode="joint", coils=4, width=16, unrolls=3, lam=100.0, seed=0,
                dtype=np.float32, classes=NUM_CLASSES):
    """Freshly initialized model.

    The trunk (``enc`` + ``rec``) initial weights depend only on ``seed``, so
    joint, recon-only and cascade models built with the same seed start from
    the same reconstruction network.
    """
    shapes = nn.encoder_shapes("enc", 2 * coils, width)
    shapes.update(nn.decoder_shapes("rec", width, 2 * coils))
    seg_width = None
    if mode == "joint":
        shapes.update(nn.decoder_shapes("seg", width, classes))
    elif mode == "cascade":
        seg_width = matched_cascade_width(coils, width, classes)
        shapes.update(_cascade_seg_shapes(seg_width, classes))
    elif mode != "recon-only":
        raise ValueError(f"unknown mode {mode!r}")
    params = nn.xavier_init(shapes, seed, dtype)
    return UnrolledModel(params, unrolls, lam, mode, coils, width, seg_width, classes)


def build_cascade(coils=4, width=16, unrolls=3, lam=100.0, seed=0, dtype=np.float32):
    return build_model("cascade", coils, width, unrolls, lam, seed, dtype)


def save_model(path, model: UnrolledModel, extra=None):
    meta = model.meta()
    if extra:
        meta.update(extra)
    save_checkpoint(path, model.params, meta)


def load_model(path):
    params, meta = load_checkpoint(path)
    return UnrolledModel(
        params, int(meta["unrolls"]), float(meta["lam"]), meta["mode"],
        int(meta["coils"]), int(meta["width"]),
        None if meta.get("seg_width") is None else int(meta["seg_width"]),
        int(meta["classes"]))


# ---------------------------------------------------------------------------
# losses


def loss_rec(gamma_s, gamma_s_ref):
    """Sum of squared differences of sum-of-squares magnitudes."""
    d = np.asarray(gamma_s, dtype=np.float64) - np.asarray(gamma_s_ref, dtype=np.float64)
    return float(np.sum(d * d))


def loss_rec_grad(gamma_s, gamma_s_ref):
    return 2.0 * (np.asarray(gamma_s) - np.asarray(gamma_s_ref))


def loss_seg(probs, labels):
    """Pixel-wise cross-entropy ``-sum_r log p_r[z_r]`` with a 1e-12 floor."""
    picked = np.take_along_axis(np.asarray(probs), np.asarray(labels)[None].astype(np.intp), axis=0)[0]
    return float(-np.sum(np.log(np.maximum(picked.astype(np.float64), PROB_FLOOR))))


def loss_seg_grad(probs, labels):
    probs = np.asarray(probs)
    idx = np.asarray(labels)[None].astype(np.intp)
    picked = np.take_along_axis(probs, idx, axis=0)
    g = np.zeros_like(probs)
    vals = np.where(picked > PROB_FLOOR, -1.0 / np.maximum(picked, PROB_FLOOR), 0.0)
    np.put_along_axis(g, idx, vals.astype(probs.dtype), axis=0)
    return g


def loss_total(rec, seg, alpha, labelled=True):
    """``(1 - alpha) rec + alpha seg``; the segmentation term is dropped for
    unlabelled data while the ``(1 - alpha)`` factor is kept."""
    if not 0 <= alpha < 1:
        raise ValueError("alpha out of range [0, 1)")
    total = (1 - alpha) * rec
    if labelled:
        total += alpha * seg
    return total


# ---------------------------------------------------------------------------
# forward / backward through the unroll


@dataclass
class Tape:
    """Everything the reverse pass needs from one forward evaluation."""

    gamma0: np.ndarray
    caches: list = field(default_factory=list)
    gammas: list = field(default_factory=list)
    probs: np.ndarray | None = None
    seg_caches: dict | None = None
    seg_acts: nn.Activations | None = None


def _as_model_precision(x, model):
    cdtype = np.complex64 if model.dtype == np.float32 else np.complex128
    return np.asarray(x).astype(cdtype, copy=False)


def idslr_forward(b, mask, model: UnrolledModel, tape=False):
    """Run the ``K``-iteration unroll from ``gamma_0 = A^H b``.

    Returns ``(gamma_K, acts)`` where ``acts`` are the encoder activations of
    the last iteration (``None`` when ``K == 0``); with ``tape=True`` the
    third element is the :class:`Tape` for the reverse pass.
    """
    b = _as_model_precision(b, model)
    gamma = apply_adjoint(b, mask)
    t = Tape(gamma0=gamma)
    acts = None
    for _ in range(model.unrolls):
        z, cache = nn.denoiser_forward(gamma, model.params)
        gamma = dc_solve(z, b, mask, model.lam)
        acts = cache.acts
        if tape:
            t.caches.append(cache)
            t.gammas.append(gamma)
    if tape:
        return gamma, acts, t
    return gamma, acts


def _segment(gamma_k, acts, model: UnrolledModel, t: Tape | None = None):
    if model.mode == "joint":
        if acts is None:
            acts = nn.encoder_forward(
                nn.complex_to_channels(gamma_k).astype(model.dtype), model.params, "enc")
        probs, caches = nn.seg_forward(acts, model.params, "seg")
    elif model.mode == "cascade":
        x = sos(gamma_k)[None].astype(model.dtype)
        acts = nn.encoder_forward(x, model.params, "senc")
        probs, caches = nn.seg_forward(acts, model.params, "seg")
    else:
        raise ValueError("recon-only model has no segmentation head")
    if t is not None:
        t.probs, t.seg_caches, t.seg_acts = probs, caches, acts
    return probs


def predict(ds: Dataset, model: UnrolledModel):
    """Reconstruct (and segment) one dataset.

    The dataset is scaled so its zero-filled SOS peaks at 1; the returned
    multi-coil image is scaled back to the input units.

    Returns
    -------
    gamma : complex ndarray (N, H, W)
    probs : ndarray (C, H, W) or None
    """
    scaled, scale = normalize(ds)
    gamma, acts = idslr_forward(scaled.kspace, scaled.mask, model)
    probs = _segment(gamma, acts, model) if model.has_segmentation else None
    return gamma / scale, probs


def _sos_backward(g_s, gamma, s):
    safe = np.where(s > 0, s, 1)
    return np.where(s > 0, g_s / safe, 0) * gamma


@dataclass
class StepResult:
    loss: float
    rec: float
    seg: float | None
    grads: dict
    gamma: np.ndarray


def loss_and_grads(ds: Dataset, model: UnrolledModel, alpha, labelled=None, normalized=False):
    """Total loss of one dataset and its exact gradient for every parameter.

    Parameters that the loss does not touch (segmentation weights on an
    unlabelled dataset) are absent from ``grads``.
    """
    if not normalized:
        ds, _ = normalize(ds)
    labelled = ds.labelled if labelled is None else labelled
    if labelled and ds.labels is None:
        raise ValueError("dataset has no labels")
    use_seg = model.has_segmentation and labelled
    if model.mode == "recon-only":
        alpha = 0.0
    if use_seg and model.unrolls == 0 and model.mode == "joint":
        raise ValueError("joint training needs at least one unroll")

    b = _as_model_precision(ds.kspace, model)
    gamma_k, acts, t = idslr_forward(b, ds.mask, model, tape=True)
    s = sos(gamma_k)
    ref = ds.reference.astype(s.dtype)
    rec = loss_rec(s, ref)
    g_s = (1 - alpha) * loss_rec_grad(s, ref)
    grads = {}
    seg = None
    feature_grads = None
    if use_seg:
        probs = _segment(gamma_k, acts, model, t)
        seg = loss_seg(probs, ds.labels)
        g_p = alpha * loss_seg_grad(probs, ds.labels)
        feature_grads, seg_grads = nn.seg_backward(
            g_p, probs, t.seg_caches, t.seg_acts, model.params, "seg")
        grads.update(seg_grads)
        if model.mode == "cascade":
            g_x, enc_grads = nn.encoder_backward(*feature_grads, t.seg_acts, model.params)
            grads.update(enc_grads)
            g_s = g_s + g_x[0]
            feature_grads = None
    total = loss_total(rec, seg if seg is not None else 0.0, alpha, use_seg)

    g_gamma = _sos_backward(g_s, gamma_k, s)
    for n in reversed(range(model.unrolls)):
        g_z = dc_jacobian(g_gamma, ds.mask, model.lam)
        extra = feature_grads if n == model.unrolls - 1 else None
        g_gamma, step_grads = nn.denoiser_backward(g_z, t.caches[n], model.params, extra)
        for k, v in step_grads.items():
            grads[k] = grads[k] + v if k in grads else v
    return StepResult(total, rec, seg, grads, gamma_k)


# ---------------------------------------------------------------------------
# optimizer and training


class Adam:
    """Adam with per-parameter step counts; parameters without a gradient in
    a step are left untouched (their moments are not decayed either)."""

    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, {}

    def step(self, params, grads):
        for name, g in grads.items():
            p = params[name]
            g = g.astype(p.dtype, copy=False)
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
                self.t[name] = 0
            self.t[name] += 1
            t = self.t[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1**t)
            vhat = v / (1 - self.beta2**t)
            p -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)


def choose_labelled(num_datasets, fraction, seed):
    """Seeded draw of ``ceil(fraction * N_t)`` labelled dataset indices."""
    if not 0 < fraction <= 1:
        raise ValueError("labelled fraction must be in (0, 1]")
    count = math.ceil(fraction * num_datasets - 1e-9)
    if count >= num_datasets:
        return list(range(num_datasets))
    rng = np.random.default_rng([seed, 0x1abe1])
    return sorted(int(i) for i in rng.choice(num_datasets, size=count, replace=False))


@dataclass
class TrainResult:
    epoch_loss: list
    epoch_rec: list
    labelled_ids: list
    steps: int


def train(datasets, model: UnrolledModel, cfg: RunConfig, progress=None):
    """Adam training, one dataset per step, ``cfg.epochs`` passes.

    Segmentation labels are used only for the seeded labelled subset (and
    only where a dataset carries labels). The dataset order of each epoch is
    a seeded permutation. Raises :class:`TrainingDiverged` on a non-finite
    loss.
    """
    if not datasets:
        raise ValueError("need at least one dataset")
    scaled = [normalize(ds)[0] for ds in datasets]
    labelled_ids = choose_labelled(len(scaled), cfg.labelled_fraction, cfg.seed)
    labelled_ids = [i for i in labelled_ids if scaled[i].labelled]
    is_labelled = set(labelled_ids)
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    rng = np.random.default_rng([cfg.seed, 0x0e0c])
    result = TrainResult([], [], labelled_ids, 0)
    for epoch in range(cfg.epochs):
        total = rec = 0.0
        for i in rng.permutation(len(scaled)):
            step = loss_and_grads(scaled[i], model, cfg.alpha, i in is_labelled, normalized=True)
            if not math.isfinite(step.loss):
                raise TrainingDiverged(
                    f"non-finite loss {step.loss} at epoch {epoch + 1}, dataset {i}")
            opt.step(model.params, step.grads)
            total += step.loss
            rec += step.rec
            result.steps += 1
        result.epoch_loss.append(total)
        result.epoch_rec.append(rec)
        if progress is not None:
            progress(epoch, total)
    return model, result
