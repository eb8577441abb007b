"""Centered unitary FFTs, the masked multi-coil Fourier operator and the
data-consistency solve.

Coil sensitivities are folded into the unknown coil images, so the forward
operator is just a masked per-coil FFT and ``A^H A`` is diagonal in k-space.
"""
import numpy as np
import scipy.fft

_AXES = (-2, -1)


def fft2c(x):
    """Centered, unitary 2-D FFT over the last two axes.

    The array origin is taken at index ``(H // 2, W // 2)`` both in image and
    in k-space. Precision follows the input (complex64 stays complex64).
    """
    x = np.asarray(x)
    if not np.iscomplexobj(x):
        x = x.astype(np.result_type(x.dtype, np.complex64))
    y = scipy.fft.ifftshift(x, axes=_AXES)
    y = scipy.fft.fft2(y, axes=_AXES, norm="ortho")
    return scipy.fft.fftshift(y, axes=_AXES)


def ifft2c(x):
    """Inverse of :func:`fft2c`."""
    x = np.asarray(x)
    if not np.iscomplexobj(x):
        x = x.astype(np.result_type(x.dtype, np.complex64))
    y = scipy.fft.ifftshift(x, axes=_AXES)
    y = scipy.fft.ifft2(y, axes=_AXES, norm="ortho")
    return scipy.fft.fftshift(y, axes=_AXES)


def _check(x, mask):
    x = np.asarray(x)
    mask = np.asarray(mask)
    if x.ndim != 3 or x.shape[1:] != mask.shape:
        raise ValueError(
            f"shape mismatch: data {x.shape} vs mask {mask.shape}; "
            "expected (N, H, W) and (H, W)")
    return x, mask.astype(bool)


def apply_forward(gamma, mask):
    """Masked per-coil FFT: ``b = U F gamma``."""
    gamma, mask = _check(gamma, mask)
    return fft2c(gamma) * mask


def apply_adjoint(b, mask):
    """``A^H b``: zero the unsampled locations, then inverse FFT per coil."""
    b, mask = _check(b, mask)
    return ifft2c(b * mask)


def apply_normal(gamma, mask):
    """``A^H A gamma``."""
    return apply_adjoint(apply_forward(gamma, mask), mask)


def dc_solve(z, b, mask, lam):
    """Solve ``(A^H A + lam I) g = A^H b + lam z`` exactly.

    The system is diagonal in k-space: sampled entries become
    ``(b + lam z_hat) / (1 + lam)``, unsampled entries keep ``z_hat``.
    """
    if not lam > 0:
        raise ValueError(f"lam must be > 0, got {lam}")
    z, mask = _check(z, mask)
    b, _ = _check(b, mask)
    zk = fft2c(z)
    out = np.where(mask, (b + lam * zk) / (1.0 + lam), zk)
    return ifft2c(out.astype(zk.dtype, copy=False))


def dc_jacobian(g, mask, lam):
    """Apply the Jacobian of :func:`dc_solve` with respect to ``z``.

    The map is ``F^H D F`` with ``D = lam / (1 + lam)`` on sampled and 1 on
    unsampled entries. It is self-adjoint, so it serves for both the
    forward-mode and reverse-mode pass.
    """
    g, mask = _check(g, mask)
    gk = fft2c(g)
    scale = np.where(mask, lam / (1.0 + lam), 1.0).astype(gk.real.dtype)
    return ifft2c(gk * scale)


def cg(apply_op, rhs, x0=None, tol=1e-8, maxiter=200):
    """Conjugate gradients for a Hermitian positive (semi)definite operator.

    Works on arrays of any shape; inner products are over all entries.

    Returns
    -------
    x : ndarray
        Final iterate.
    info : dict
        ``iterations``, ``residual`` (relative to ``||rhs||``) and
        ``converged``.
    """
    x = np.zeros_like(rhs) if x0 is None else np.array(x0, dtype=rhs.dtype)
    r = rhs - apply_op(x) if x0 is not None else rhs.copy()
    bnorm = np.linalg.norm(rhs)
    if bnorm == 0:
        return np.zeros_like(rhs), {"iterations": 0, "residual": 0.0, "converged": True}
    p = r.copy()
    rs = np.vdot(r, r).real
    it = 0
    rel = np.sqrt(rs) / bnorm
    while rel > tol and it < maxiter:
        ap = apply_op(p)
        pap = np.vdot(p, ap).real
        if pap <= 0:
            break
        step = rs / pap
        x = x + step * p
        r = r - step * ap
        rs_new = np.vdot(r, r).real
        p = r + (rs_new / rs) * p
        rs = rs_new
        it += 1
        rel = np.sqrt(rs) / bnorm
    return x, {"iterations": it, "residual": float(rel), "converged": bool(rel <= tol)}


def dc_solve_cg(z, b, mask, lam, tol=1e-12, maxiter=500):
    """Reference DC solve by CG on the normal equations (test oracle)."""
    rhs = apply_adjoint(b, mask) + lam * z
    x, _ = cg(lambda g: apply_normal(g, mask) + lam * g, rhs, tol=tol, maxiter=maxiter)
    return x
