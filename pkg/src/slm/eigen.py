"""Cyclic Jacobi eigenvalues for stacks of small Hermitian matrices."""

import numpy as np

__all__ = ["jacobi_eigvalsh"]


def _rotate(a, p, q):
    apq = a[:, p, q]
    mag = np.abs(apq)
    active = mag > 0.0
    safe = np.where(active, mag, 1.0)
    app = a[:, p, p].real
    aqq = a[:, q, q].real
    tau = (aqq - app) / (2.0 * safe)
    t = np.where(tau >= 0.0, 1.0, -1.0) / (np.abs(tau) + np.hypot(1.0, tau))
    t = np.where(active, t, 0.0)
    c = 1.0 / np.sqrt(1.0 + t * t)
    s = t * c
    # phase that makes a[p, q] real before the real plane rotation
    ph = np.where(active, np.conj(apq) / safe, 1.0)

    # columns: U = [[c, s], [-s*ph, c*ph]] on (p, q)
    colp = a[:, :, p].copy()
    colq = a[:, :, q]
    a[:, :, p] = c[:, None] * colp - (s * ph)[:, None] * colq
    a[:, :, q] = s[:, None] * colp + (c * ph)[:, None] * colq
    # rows: U^H from the left
    rowp = a[:, p, :].copy()
    rowq = a[:, q, :]
    a[:, p, :] = c[:, None] * rowp - (s * np.conj(ph))[:, None] * rowq
    a[:, q, :] = s[:, None] * rowp + (c * np.conj(ph))[:, None] * rowq
    a[:, p, q] = 0.0
    a[:, q, p] = 0.0


def jacobi_eigvalsh(h, tol=1e-14, max_sweeps=50):
    """Ascending eigenvalues of Hermitian matrices ``h`` of shape (..., n, n).

    Row-cyclic sweeps over all (p, q) pairs until the off-diagonal Frobenius
    norm falls below ``tol`` times the full norm for every matrix in the stack.
    """
    h = np.asarray(h)
    shape = h.shape
    if h.ndim < 2 or shape[-1] != shape[-2]:
        raise ValueError("expected a stack of square matrices")
    n = shape[-1]
    a = np.array(h, dtype=complex).reshape(-1, n, n)
    a = 0.5 * (a + np.conj(np.swapaxes(a, 1, 2)))
    scale = np.sqrt(np.sum(np.abs(a) ** 2, axis=(1, 2)))
    off_mask = ~np.eye(n, dtype=bool)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.abs(a[:, off_mask]) ** 2, axis=1))
        if np.all(off <= tol * scale):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                _rotate(a, p, q)
    else:
        raise RuntimeError("Jacobi sweeps did not converge")
    w = np.sort(np.diagonal(a, axis1=1, axis2=2).real, axis=1)
    return w.reshape(shape[:-1])
