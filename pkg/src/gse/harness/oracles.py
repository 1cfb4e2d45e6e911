"""Reference computations kept independent of the code paths they check."""

from __future__ import annotations

import numpy as np


def jacobi_eigvals_sym(a: np.ndarray, tol: float = 1e-14, max_sweeps: int = 100) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic two-sided Jacobi rotations.

    Sweeps run until the off-diagonal Frobenius mass drops below ``tol`` times
    the matrix norm (absolute ``tol`` for the zero matrix). Returned descending.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    scale = max(np.linalg.norm(a), 1.0)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.triu(a, 1) ** 2) * 2.0)
        if off < tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < 1e-300:
                    continue
                diff = a[q, q] - a[p, p]
                if abs(diff) > 1e100 * abs(apq):
                    t = apq / diff  # theta too large to square
                else:
                    theta = diff / (2.0 * apq)
                    t = 1.0 if theta == 0 else np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p], a[:, q] = c * ap - s * aq, s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :], a[q, :] = c * ap - s * aq, s * ap + c * aq
    else:
        raise RuntimeError("Jacobi eigenvalue iteration did not converge")
    return np.sort(np.diag(a))[::-1]


def singular_values_via_gram(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    gram = w.T @ w if w.shape[0] >= w.shape[1] else w @ w.T
    return np.sqrt(np.clip(jacobi_eigvals_sym(gram), 0.0, None))


def central_difference(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` by central differences, entry by entry."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        fp = f(x)
        x[idx] = old - eps
        fm = f(x)
        x[idx] = old
        grad[idx] = (fp - fm) / (2 * eps)
    return grad
