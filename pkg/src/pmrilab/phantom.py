"""Seeded synthetic data: labelled brain-like phantoms, smooth coil maps,
variable-density Cartesian masks and noisy undersampled acquisitions.

Every generator is a pure function of its arguments and seed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fourier import fft2c, ifft2c
from .tensors_io import Dataset

TEXTURE_AMPLITUDE = 0.05


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry and contrast of the synthetic slice.

    Intensity ranges are closed intervals per tissue class; the pixel values
    of a class, texture included, stay inside its range.
    """

    height: int = 64
    width: int = 64
    csf_ellipses: int = 2
    gm_ellipses: int = 2
    csf_range: tuple = (0.15, 0.30)
    gm_range: tuple = (0.45, 0.65)
    wm_range: tuple = (0.75, 0.95)
    fold_amplitude: float = 0.06

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise ValueError("phantom must be at least 8x8")
        ranges = [self.csf_range, self.gm_range, self.wm_range]
        for lo, hi in ranges:
            if not 0 < lo < hi:
                raise ValueError(f"bad intensity range {(lo, hi)}")
            if hi / (1 + TEXTURE_AMPLITUDE) < lo / (1 - TEXTURE_AMPLITUDE):
                raise ValueError(f"range {(lo, hi)} too narrow for the texture")
        for (_, hi), (lo, _) in zip(ranges, ranges[1:]):
            if lo - hi < 0.1 - 1e-9:
                raise ValueError("class intensity ranges must be separated by >= 0.1")
        if self.csf_ellipses < 0 or self.gm_ellipses < 0:
            raise ValueError("ellipse counts must be >= 0")
        if not 0 <= self.fold_amplitude < 0.2:
            raise ValueError("fold_amplitude must be in [0, 0.2)")

    @property
    def ranges(self):
        return {1: self.csf_range, 2: self.gm_range, 3: self.wm_range}


@dataclass(frozen=True)
class AcquisitionConfig:
    coils: int = 4
    noise: float = 0.0
    accel: float = 6.0
    center_fraction: float = 0.04
    density_exponent: float = 2.0

    def __post_init__(self):
        if self.coils < 1:
            raise ValueError("coils must be >= 1")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if not 1 <= self.accel <= 12:
            raise ValueError(f"accel must be in [1, 12], got {self.accel}")
        if not 0 < self.center_fraction <= 1:
            raise ValueError("center_fraction must be in (0, 1]")


def _grid(h, w):
    """Normalized coordinates in [-1, 1], symmetric about the array center."""
    y = (np.arange(h) - (h - 1) / 2) / (h / 2)
    x = (np.arange(w) - (w - 1) / 2) / (w / 2)
    return np.meshgrid(y, x, indexing="ij")


def _ellipse(yy, xx, cy, cx, ry, rx, angle, folds=None):
    """Boolean region of a rotated ellipse, optionally with a wavy boundary."""
    c, s = np.cos(angle), np.sin(angle)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    r = np.sqrt((u / rx) ** 2 + (v / ry) ** 2)
    limit = 1.0
    if folds is not None:
        amp, k, phase = folds
        limit = 1.0 + amp * np.sin(k * np.arctan2(v, u) + phase)
    return r <= limit


def _smooth_texture(yy, xx, rng, terms=4):
    """Low-frequency field with max |value| == 1."""
    t = np.zeros_like(yy)
    for _ in range(terms):
        fy, fx = rng.uniform(0.5, 2.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        t += rng.uniform(0.5, 1.0) * np.cos(np.pi * (fy * yy + fx * xx) + phase)
    return t / np.max(np.abs(t))


def make_phantom(spec: PhantomSpec = PhantomSpec(), seed=0):
    """Nested-ellipse brain-like slice and its generating label map.

    Structure: an outer CSF layer, a folded cortical GM ribbon, WM core,
    ``csf_ellipses`` ventricle-like CSF blobs and ``gm_ellipses`` deep GM
    blobs inside the WM. Each class gets one intensity drawn from its range
    and a smooth multiplicative texture of at most 5 %.

    Returns
    -------
    image : complex128 ndarray, (H, W)
    labels : uint8 ndarray, (H, W)
    """
    rng = np.random.default_rng(seed)
    yy, xx = _grid(spec.height, spec.width)
    labels = np.zeros((spec.height, spec.width), dtype=np.uint8)

    cy, cx = rng.uniform(-0.03, 0.03, size=2)
    ry = rng.uniform(0.84, 0.90)
    rx = rng.uniform(0.74, 0.80)
    angle = rng.uniform(-0.1, 0.1)
    labels[_ellipse(yy, xx, cy, cx, ry, rx, angle)] = 1

    cortex = rng.uniform(0.86, 0.90)
    folds = (spec.fold_amplitude, rng.integers(7, 11), rng.uniform(0, 2 * np.pi))
    labels[_ellipse(yy, xx, cy, cx, cortex * ry, cortex * rx, angle, folds)] = 2

    core = rng.uniform(0.62, 0.68)
    folds = (spec.fold_amplitude, rng.integers(5, 9), rng.uniform(0, 2 * np.pi))
    labels[_ellipse(yy, xx, cy, cx, core * ry, core * rx, angle, folds)] = 3

    for i in range(spec.gm_ellipses):
        side = -1 if i % 2 == 0 else 1
        by = cy + rng.uniform(0.0, 0.15)
        bx = cx + side * rng.uniform(0.18, 0.26)
        region = _ellipse(yy, xx, by, bx, rng.uniform(0.12, 0.16),
                          rng.uniform(0.07, 0.10), rng.uniform(-0.5, 0.5))
        labels[region] = 2

    for i in range(spec.csf_ellipses):
        side = -1 if i % 2 == 0 else 1
        vy = cy + rng.uniform(-0.15, -0.05)
        vx = cx + side * rng.uniform(0.05, 0.10)
        region = _ellipse(yy, xx, vy, vx, rng.uniform(0.18, 0.26),
                          rng.uniform(0.05, 0.08), side * rng.uniform(0.1, 0.35))
        labels[region] = 1

    image = np.zeros(labels.shape)
    for cls, (lo, hi) in spec.ranges.items():
        base = rng.uniform(lo / (1 - TEXTURE_AMPLITUDE), hi / (1 + TEXTURE_AMPLITUDE))
        texture = _smooth_texture(yy, xx, rng)
        region = labels == cls
        image[region] = base * (1 + TEXTURE_AMPLITUDE * texture[region])
    return image.astype(np.complex128), labels


def make_coil_sensitivities(height, width, coils, seed=0, width_fov=0.7):
    """Smooth complex coil maps normalized to unit sum-of-squares.

    Coil ``i`` is a Gaussian bump centered at angle ``2 pi i / N`` on the FOV
    boundary, with standard deviation ``width_fov`` times the FOV, times a
    coil-specific random linear phase that is zero at the image center.

    Returns
    -------
    complex128 ndarray, (N, H, W)
    """
    if coils < 1:
        raise ValueError("coils must be >= 1")
    rng = np.random.default_rng(seed)
    yy, xx = _grid(height, width)
    # grid spans [-1, 1]; the FOV has length 2
    sigma = 2.0 * width_fov
    maps = np.empty((coils, height, width), dtype=np.complex128)
    for i in range(coils):
        theta = 2 * np.pi * i / coils
        py, px = np.sin(theta), np.cos(theta)
        mag = np.exp(-((yy - py) ** 2 + (xx - px) ** 2) / (2 * sigma**2))
        ky, kx = rng.uniform(-np.pi / 4, np.pi / 4, size=2)
        phase = ky * yy + kx * xx
        maps[i] = mag * np.exp(1j * phase)
    maps /= np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))
    return maps


def center_block(height, width, center_fraction):
    """Boolean mask of the fully sampled central k-space block."""
    side = np.sqrt(center_fraction)
    bh = min(height, max(1, int(round(side * height))))
    bw = min(width, max(1, int(round(side * width))))
    block = np.zeros((height, width), dtype=bool)
    y0 = height // 2 - bh // 2
    x0 = width // 2 - bw // 2
    block[y0:y0 + bh, x0:x0 + bw] = True
    return block


def make_vd_mask(height, width, accel, center_fraction=0.04, d=2.0, seed=0):
    """Point-wise variable-density Cartesian mask.

    Location ``k`` is kept when ``u_k < c * (1 - rho_k / rho_max) ** d`` with
    ``u_k ~ U(0, 1)`` drawn once from ``seed`` and ``rho`` the normalized
    distance to the k-space center. The scale ``c`` is the bisection limit
    that makes the realized sampled count equal ``round(H W / accel)``,
    computed exactly by ranking ``u_k / weight_k``. The central block is
    always kept.
    """
    if not 1 <= accel <= 12:
        raise ValueError(f"accel must be in [1, 12], got {accel}")
    if not 0 < center_fraction <= 1:
        raise ValueError("center_fraction must be in (0, 1]")
    if accel == 1:
        return np.ones((height, width), dtype=bool)
    rng = np.random.default_rng(seed)
    u = rng.uniform(size=(height, width))
    ky = (np.arange(height) - height // 2) / (height / 2)
    kx = (np.arange(width) - width // 2) / (width / 2)
    rho = np.hypot(*np.meshgrid(ky, kx, indexing="ij"))
    weight = (1.0 - rho / rho.max()) ** d

    keep = center_block(height, width, center_fraction)
    target = int(round(height * width / accel))
    extra = target - int(keep.sum())
    if extra < 0:
        raise ValueError(
            f"accel={accel} infeasible: center block alone samples "
            f"{keep.sum()} > {target} locations")
    with np.errstate(divide="ignore"):
        threshold = np.where(weight > 0, u / weight, np.inf)
    threshold[keep] = np.inf
    order = np.argsort(threshold, axis=None, kind="stable")[:extra]
    keep.flat[order] = True
    return keep


def sos(gamma):
    """Root sum of squares over the coil axis."""
    return np.sqrt(np.sum(np.abs(gamma) ** 2, axis=0))


def simulate_acquisition(image, sens, mask, noise=0.0, seed=0, labels=None, accel=None):
    """Simulate ``b_i = U(F(s_i image)) + n_i``.

    Noise is circular complex Gaussian with ``E|n|^2 = noise^2`` and is added
    before masking, so unsampled entries are exactly zero.
    """
    image = np.asarray(image)
    sens = np.asarray(sens)
    mask = np.asarray(mask, dtype=bool)
    if sens.shape[1:] != image.shape or mask.shape != image.shape:
        raise ValueError("image, sensitivity and mask shapes are inconsistent")
    coil_images = sens * image[None]
    kspace = fft2c(coil_images)
    if noise > 0:
        rng = np.random.default_rng(seed)
        n = rng.standard_normal(kspace.shape) + 1j * rng.standard_normal(kspace.shape)
        kspace = kspace + (noise / np.sqrt(2)) * n
    kspace = (kspace * mask).astype(np.complex64)
    return Dataset(
        kspace=kspace,
        mask=mask,
        sens=sens.astype(np.complex64),
        reference=sos(coil_images).astype(np.float32),
        labels=None if labels is None else np.asarray(labels, dtype=np.uint8),
        seed=int(seed),
        accel=float(accel) if accel is not None else float(mask.size / max(mask.sum(), 1)),
        noise=float(noise),
    )


def make_dataset(seed, acq: AcquisitionConfig = AcquisitionConfig(),
                 spec: PhantomSpec = PhantomSpec(), labelled=True):
    """Phantom + coil maps + mask + acquisition, all derived from one seed."""
    s_phantom, s_coil, s_mask, s_noise = np.random.SeedSequence(seed).generate_state(4)
    image, labels = make_phantom(spec, int(s_phantom))
    sens = make_coil_sensitivities(spec.height, spec.width, acq.coils, int(s_coil))
    mask = make_vd_mask(spec.height, spec.width, acq.accel, acq.center_fraction,
                        acq.density_exponent, int(s_mask))
    ds = simulate_acquisition(image, sens, mask, acq.noise, int(s_noise),
                              labels=labels if labelled else None, accel=acq.accel)
    # record the user-facing seed, not the derived noise seed
    return Dataset(**{**ds.__dict__, "seed": int(seed)})


def zero_filled(ds: Dataset):
    """``A^H b`` for a dataset."""
    return ifft2c(ds.kspace * ds.mask)


def normalize(ds: Dataset):
    """Scale k-space and reference so the zero-filled SOS peaks at 1.

    Returns the scaled dataset and the scale factor applied.
    """
    peak = float(sos(zero_filled(ds)).max())
    if peak == 0:
        return ds, 1.0
    scale = 1.0 / peak
    scaled = Dataset(**{**ds.__dict__,
                        "kspace": (ds.kspace * scale).astype(ds.kspace.dtype),
                        "reference": (ds.reference * scale).astype(ds.reference.dtype)})
    return scaled, scale
