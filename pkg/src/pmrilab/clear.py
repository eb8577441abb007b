"""Locally low-rank (CLEAR) calibrationless reconstruction.

Patch matrices stack co-located ``M x M`` patches of all ``N`` coil images as
columns, giving tall ``M^2 x N`` matrices that are close to rank one when the
coil maps are smooth. The reconstruction minimizes

    ||A g - b||^2 + lam * sum_c ||Gamma_c(g)||_*

by IRLS: each outer iteration fixes right-weights ``W_c`` and solves the
resulting quadratic problem with conjugate gradients.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fourier import apply_adjoint, apply_forward, apply_normal, cg


@dataclass(frozen=True)
class PatchConfig:
    """Patch lattice with periodic boundaries.

    A patch "centered" at ``c`` covers rows ``c_y - M//2 .. c_y - M//2 + M - 1``
    (same for columns). Centers lie on the lattice ``0, stride, 2 stride, ...``
    in both directions.
    """

    size: int = 8
    stride: int = 4

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("patch size must be >= 1")
        if not 1 <= self.stride <= self.size:
            raise ValueError("stride must satisfy 1 <= stride <= size")

    def validate(self, shape):
        coils, h, w = shape
        if self.size > min(h, w):
            raise ValueError(f"patch size {self.size} exceeds image {h}x{w}")
        if coils >= self.size**2:
            raise ValueError("patch matrices must be tall: need N < M^2")

    def centers(self, h, w):
        """Row-major list of ``(row, col)`` patch centers."""
        ys = range(0, h, self.stride)
        xs = range(0, w, self.stride)
        return [(y, x) for y in ys for x in xs]

    def offsets(self):
        return np.arange(self.size) - self.size // 2

    def flat_indices(self, h, w):
        """``(P, M*M)`` flat pixel indices of every patch, row-major inside."""
        centers = np.array(self.centers(h, w))
        off = self.offsets()
        rows = (centers[:, 0, None] + off[None, :]) % h
        cols = (centers[:, 1, None] + off[None, :]) % w
        return (rows[:, :, None] * w + cols[:, None, :]).reshape(len(centers), -1)


@dataclass
class NullSpaceBasis:
    """Annihilating vectors of one patch matrix.

    ``left`` holds row vectors ``u`` with ``u @ Gamma ~ 0`` (shape
    ``(M^2 - r, M^2)``); ``right`` holds column vectors ``v`` with
    ``Gamma @ v ~ 0`` (shape ``(N, N - r)``).
    """

    rank: int
    left: np.ndarray
    right: np.ndarray
    singular_values: np.ndarray
    center: tuple | None = None


@dataclass
class IrlsState:
    gamma: np.ndarray
    weights: np.ndarray
    eps: float
    eps_history: list = field(default_factory=list)
    objective: list = field(default_factory=list)
    objective_before: list = field(default_factory=list)
    cg_iterations: list = field(default_factory=list)
    cg_converged: list = field(default_factory=list)

    @property
    def converged(self):
        return all(self.cg_converged)


# ---------------------------------------------------------------------------
# patch operators


def extract_patches(gamma, cfg: PatchConfig):
    """Patch matrices of a multi-coil image.

    Returns an array of shape ``(P, M*M, N)``; entry ``[p]`` is the patch
    matrix at the ``p``-th center of ``cfg.centers`` (row-major order), and
    column ``i`` is the vectorized patch of coil ``i``.
    """
    gamma = np.asarray(gamma)
    cfg.validate(gamma.shape)
    n, h, w = gamma.shape
    idx = cfg.flat_indices(h, w)
    return gamma.reshape(n, h * w)[:, idx].transpose(1, 2, 0)


def patch_adjoint(patches, cfg: PatchConfig, shape):
    """Transpose of :func:`extract_patches`: scatter-add patches back.

    Accumulation uses ``np.bincount`` over the fixed center ordering, so the
    result does not depend on threading.
    """
    n, h, w = shape
    idx = cfg.flat_indices(h, w)
    patches = np.asarray(patches)
    if patches.shape != (idx.shape[0], idx.shape[1], n):
        raise ValueError(
            f"patch lattice mismatch: got {patches.shape}, "
            f"expected {(idx.shape[0], idx.shape[1], n)}")
    flat = idx.ravel()
    out = np.empty((n, h * w), dtype=np.result_type(patches.dtype, np.complex64))
    for i in range(n):
        vals = patches[:, :, i].ravel()
        out[i] = np.bincount(flat, weights=vals.real, minlength=h * w)
        if np.iscomplexobj(vals):
            out[i] += 1j * np.bincount(flat, weights=vals.imag, minlength=h * w)
    return out.reshape(n, h, w)


def cover_count(cfg: PatchConfig, h, w):
    """How many patches cover each pixel."""
    idx = cfg.flat_indices(h, w)
    return np.bincount(idx.ravel(), minlength=h * w).reshape(h, w)


def patchwise_constant(maps, cfg: PatchConfig):
    """Hold each map constant over every patch support.

    Each patch takes the map values at its center. Needs ``stride == size``
    so the supports tile the image. Coil images built with such maps give
    patch matrices of rank exactly one.
    """
    maps = np.asarray(maps)
    if cfg.stride != cfg.size:
        raise ValueError("patchwise_constant needs non-overlapping patches (stride == size)")
    n, h, w = maps.shape
    if h % cfg.size or w % cfg.size:
        raise ValueError("image size must be a multiple of the patch size")
    idx = cfg.flat_indices(h, w)
    centers = np.array(cfg.centers(h, w))
    flat = maps.reshape(n, h * w)
    out = np.empty_like(flat)
    out[:, idx] = flat[:, centers[:, 0] * w + centers[:, 1]][:, :, None]
    return out.reshape(maps.shape)


# ---------------------------------------------------------------------------
# singular values


def jacobi_singular_values(a, tol=1e-15, max_sweeps=60):
    """Singular values of (a batch of) tall matrices by one-sided Jacobi.

    Hestenes' method: plane rotations orthogonalize column pairs until all
    pairs are numerically orthogonal; the column norms are then the singular
    values. ``a`` has shape ``(..., m, n)`` with ``m >= n``. Returned values
    are sorted in descending order.
    """
    a = np.array(a, dtype=np.result_type(a, np.complex128), copy=True)
    if a.ndim < 2:
        raise ValueError("need at least a 2-D array")
    batch_shape = a.shape[:-2]
    m, n = a.shape[-2:]
    if m < n:
        a = np.swapaxes(a, -1, -2).conj()
        m, n = n, m
    a = a.reshape(-1, m, n)
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                ap, aq = a[:, :, p], a[:, :, q]
                alpha = np.sum(np.abs(ap) ** 2, axis=1)
                beta = np.sum(np.abs(aq) ** 2, axis=1)
                g = np.sum(ap.conj() * aq, axis=1)
                mag = np.abs(g)
                active = mag > tol * np.sqrt(alpha * beta)
                if not np.any(active):
                    continue
                rotated = True
                safe = np.where(active, mag, 1.0)
                phase = np.where(active, g / safe, 1.0)
                zeta = (beta - alpha) / (2 * safe)
                t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1 + zeta**2))
                t = np.where(active, t, 0.0)
                c = 1 / np.sqrt(1 + t**2)
                s = c * t
                aq_rot = aq * phase.conj()[:, None]
                new_p = c[:, None] * ap - s[:, None] * aq_rot
                new_q = s[:, None] * ap + c[:, None] * aq_rot
                a[:, :, p] = new_p
                a[:, :, q] = np.where(active[:, None], new_q * phase[:, None], aq)
        if not rotated:
            break
    sv = np.sqrt(np.sum(np.abs(a) ** 2, axis=1))
    sv = -np.sort(-sv, axis=1)
    return sv.reshape(batch_shape + (n,))


def nuclear_norm(gamma_c):
    """Sum of singular values of a matrix, or of each matrix in a batch."""
    gamma_c = np.asarray(gamma_c)
    if not np.all(np.isfinite(gamma_c)):
        raise ValueError("nuclear_norm: non-finite input")
    return jacobi_singular_values(gamma_c).sum(axis=-1)


# ---------------------------------------------------------------------------
# objectives and IRLS pieces


def data_fidelity(gamma, b, mask):
    r = apply_forward(gamma, mask) - b * np.asarray(mask, dtype=bool)
    return float(np.vdot(r, r).real)


def clear_objective(gamma, b, mask, lam, cfg: PatchConfig):
    """``||A g - b||^2 + lam * sum_c ||Gamma_c||_*`` (unscaled data term)."""
    if lam < 0:
        raise ValueError("lam must be >= 0")
    gamma = np.asarray(gamma)
    b = np.asarray(b)
    if gamma.shape != b.shape:
        raise ValueError(f"shape mismatch: image {gamma.shape} vs data {b.shape}")
    value = data_fidelity(gamma, b, mask)
    if lam > 0:
        value += lam * float(np.sum(nuclear_norm(extract_patches(gamma, cfg))))
    return value


def _gram_eig(gamma_c):
    gram = np.swapaxes(gamma_c, -1, -2).conj() @ gamma_c
    gram = 0.5 * (gram + np.swapaxes(gram, -1, -2).conj())
    evals, evecs = np.linalg.eigh(gram)
    return np.clip(evals, 0, None), evecs


def irls_weights(gamma_c, eps):
    """``W = (Gamma^H Gamma + eps I)^(-1/2)`` for one or a batch of patches."""
    if not eps > 0:
        raise ValueError("eps must be > 0")
    gamma_c = np.asarray(gamma_c)
    if not np.all(np.isfinite(gamma_c)):
        raise np.linalg.LinAlgError("irls_weights: non-finite patch matrix")
    evals, evecs = _gram_eig(gamma_c)
    scale = 1.0 / np.sqrt(evals + eps)
    w = (evecs * scale[..., None, :]) @ np.swapaxes(evecs, -1, -2).conj()
    return 0.5 * (w + np.swapaxes(w, -1, -2).conj())


def smoothed_penalty(gamma_c, eps):
    """``sum_c tr((Gamma_c^H Gamma_c + eps I)^(1/2))``."""
    evals, _ = _gram_eig(gamma_c)
    return float(np.sum(np.sqrt(evals + eps)))


def smoothed_objective(gamma, b, mask, lam, cfg: PatchConfig, eps):
    """IRLS surrogate-consistent smoothing of the CLEAR objective."""
    return data_fidelity(gamma, b, mask) + lam * smoothed_penalty(
        extract_patches(gamma, cfg), eps)


def weighted_penalty_op(x, weights, cfg: PatchConfig):
    """``sum_c P_c^T(P_c(x) W_c)``: gradient operator of the weighted penalty."""
    return patch_adjoint(extract_patches(x, cfg) @ weights, cfg, x.shape)


# ---------------------------------------------------------------------------
# annihilation relations


def null_space_filters(gamma_c, rank_tol=1e-3, center=None):
    """Left and right annihilators of a patch matrix.

    The numerical rank is ``r = #{sigma_k >= rank_tol * sigma_1}``; the
    trailing singular vectors span the annihilating subspaces.
    """
    if not 0 < rank_tol < 1:
        raise ValueError("rank_tol must be in (0, 1)")
    gamma_c = np.asarray(gamma_c)
    u, s, vh = np.linalg.svd(gamma_c, full_matrices=True)
    rank = int(np.sum(s >= rank_tol * s[0])) if s[0] > 0 else 0
    return NullSpaceBasis(
        rank=rank,
        left=u[:, rank:].conj().T,
        right=vh[rank:].conj().T,
        singular_values=s,
        center=center,
    )


def annihilation_matrix(basis: NullSpaceBasis, coils):
    """Stack the intra-channel and inter-channel annihilation relations.

    Returns ``Q`` acting on the vertically concatenated patches
    ``p = [P(g_1); ...; P(g_N)]``: one ``kron(I_N, u)`` block per left
    vector (intra-channel relations, one row per coil) and one
    ``kron(v^T, I_{M^2})`` block per right vector (inter-channel relations,
    one row per patch pixel).
    """
    m2 = basis.left.shape[1]
    blocks = [np.kron(np.eye(coils), u[None, :]) for u in basis.left]
    blocks += [np.kron(v[None, :], np.eye(m2)) for v in basis.right.T]
    if not blocks:
        return np.zeros((0, coils * m2), dtype=np.complex128)
    return np.vstack(blocks)


def stacked_patch_vector(gamma_c):
    """``p_c``: columns of the patch matrix concatenated vertically."""
    return np.asarray(gamma_c).T.reshape(-1)


def annihilation_filters(q, coils, size):
    """Reshape rows of ``Q`` into multi-channel ``(N, M, M)`` filters."""
    return np.asarray(q).reshape(-1, coils, size, size)


def filter_response(gamma, filt, center, cfg: PatchConfig):
    """Evaluate a spatially varying multi-channel filter at ``center``.

    Computes the circular convolution of each coil image with the flipped
    filter via FFTs, sums over coils, and samples the result at ``center``.
    Equivalent to one row of ``Q_c @ p_c``.
    """
    gamma = np.asarray(gamma)
    n, h, w = gamma.shape
    off = cfg.offsets()
    kernel = np.zeros((n, h, w), dtype=np.complex128)
    rows = (-off) % h
    cols = (-off) % w
    kernel[:, rows[:, None], cols[None, :]] = filt
    conv = np.fft.ifft2(np.fft.fft2(gamma) * np.fft.fft2(kernel))
    return conv[:, center[0], center[1]].sum()


# ---------------------------------------------------------------------------
# reconstruction


def initial_eps(gamma, cfg: PatchConfig, scale=0.01):
    """``scale * sigma_1^2`` of the largest patch matrix."""
    evals, _ = _gram_eig(extract_patches(gamma, cfg))
    top = float(evals[..., -1].max())
    return scale * top if top > 0 else scale


def clear_reconstruct(b, mask, lam, cfg: PatchConfig = PatchConfig(), iters=15,
                      eps_scale=0.01, eps_decay=0.2, eps_floor=1e-8,
                      cg_tol=1e-8, cg_maxiter=200, x0=None):
    """IRLS solver for the CLEAR objective.

    Each outer iteration sets ``W_c = (Gamma_c^H Gamma_c + eps I)^(-1/2)`` and
    minimizes the quadratic majorizer

        ||A g - b||^2 + (lam / 2) * sum_c tr(Gamma_c W_c Gamma_c^H)

    by CG warm-started at the current iterate, so the smoothed objective
    ``F_eps`` never increases at fixed ``eps``. Then ``eps`` decays
    geometrically down to ``eps_floor * eps_0``.

    Returns
    -------
    gamma : ndarray (N, H, W)
    state : IrlsState
        ``objective[k]`` is ``F_eps_k`` after iteration ``k``;
        ``objective_before[k]`` is ``F_eps_k`` at the iterate it started from.
    """
    if not lam > 0:
        raise ValueError("lam must be > 0")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    b = np.asarray(b, dtype=np.complex128)
    mask = np.asarray(mask, dtype=bool)
    cfg.validate(b.shape)
    rhs = apply_adjoint(b, mask)
    gamma = rhs.copy() if x0 is None else np.array(x0, dtype=np.complex128)
    eps0 = initial_eps(gamma, cfg, eps_scale)
    eps = eps0
    state = IrlsState(gamma=gamma, weights=None, eps=eps)
    for _ in range(iters):
        weights = irls_weights(extract_patches(gamma, cfg), eps)
        half = 0.5 * lam

        def normal_op(x, weights=weights):
            return apply_normal(x, mask) + half * weighted_penalty_op(x, weights, cfg)

        state.objective_before.append(smoothed_objective(gamma, b, mask, lam, cfg, eps))
        gamma, info = cg(normal_op, rhs, x0=gamma, tol=cg_tol, maxiter=cg_maxiter)
        state.objective.append(smoothed_objective(gamma, b, mask, lam, cfg, eps))
        state.eps_history.append(eps)
        state.cg_iterations.append(info["iterations"])
        state.cg_converged.append(info["converged"])
        state.weights = weights
        eps = max(eps * eps_decay, eps_floor * eps0)
    state.gamma = gamma
    state.eps = eps
    return gamma, state
