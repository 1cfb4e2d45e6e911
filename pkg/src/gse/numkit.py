"""Dense float64 kernel: validation, norms, counter-based Gaussian streams, and
a deterministic one-sided Jacobi SVD.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64; column
vectors are 1-D arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "RngStream",
    "SpectralDecomposition",
    "as_matrix",
    "check_finite",
    "frob_norm_sq",
    "gaussian_matrix",
    "svd",
]

_MASK64 = (1 << 64) - 1


def check_finite(a: np.ndarray, name: str = "matrix") -> None:
    """Raise ``ValueError`` naming the first non-finite entry of ``a``."""
    bad = np.argwhere(~np.isfinite(a))
    if bad.size:
        idx = tuple(int(i) for i in bad[0])
        raise ValueError(f"{name} has non-finite entry {a[idx]!r} at index {idx}")


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce ``a`` to a finite 2-D float64 array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    check_finite(m, name)
    return m


def frob_norm_sq(w: np.ndarray) -> float:
    """Sum of squared entries."""
    w = np.asarray(w, dtype=np.float64)
    return float(np.sum(w * w))


# ---------------------------------------------------------------------------
# Random streams


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


@dataclass(frozen=True)
class RngStream:
    """An immutable handle on a Philox counter-based stream.

    The Philox key is ``(seed, stream_id)`` and ``counter`` is the block offset,
    so a stream is reproducible from its three integers alone and distinct
    ``stream_id`` values never share state.
    """

    seed: int
    stream_id: int = 0
    counter: int = 0

    def __post_init__(self):
        for field in ("seed", "stream_id", "counter"):
            v = getattr(self, field)
            if not 0 <= v <= _MASK64:
                raise ValueError(f"{field} must fit in an unsigned 64-bit integer, got {v}")

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        counter = np.array([self.counter, 0, 0, 0], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key, counter=counter))

    def substream(self, label: int) -> "RngStream":
        """Child stream keyed by ``label``; the counter restarts at zero."""
        sid = _splitmix64(self.stream_id ^ _splitmix64(label & _MASK64))
        return RngStream(self.seed, sid, 0)

    def advance(self, blocks: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id, (self.counter + blocks) & _MASK64)


def gaussian_matrix(rows: int, cols: int, std: float, rng: RngStream) -> np.ndarray:
    """I.i.d. Normal(0, std**2) entries drawn from ``rng``."""
    if not std > 0:
        raise ValueError(f"std must be positive, got {std}")
    if rows < 0 or cols < 0:
        raise ValueError(f"negative shape ({rows}, {cols})")
    return rng.generator().normal(0.0, std, size=(rows, cols))


# ---------------------------------------------------------------------------
# SVD


@dataclass(frozen=True)
class SpectralDecomposition:
    """``u @ diag(sigma) @ v.T`` with ``sigma`` descending and r = min(m, n)."""

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    @property
    def rank_slots(self) -> int:
        return self.sigma.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.v.T


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Tournament schedule covering every column pair once per sweep.

    Each round is a set of disjoint pairs, so its rotations commute and can be
    applied together.
    """
    players = list(range(n)) + ([-1] if n % 2 else [])
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        ps, qs = [], []
        for i in range(size // 2):
            a, b = players[i], players[size - 1 - i]
            if a >= 0 and b >= 0:
                ps.append(min(a, b))
                qs.append(max(a, b))
        rounds.append((np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _complete_basis(u: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Replace columns where ``valid`` is False with orthonormal completions.

    Candidates are standard basis vectors in row order, so the result is
    deterministic.
    """
    m = u.shape[0]
    out = u.copy()
    basis = [out[:, j] for j in range(out.shape[1]) if valid[j]]
    e = 0
    for j in np.flatnonzero(~valid):
        while True:
            cand = np.zeros(m)
            cand[e] = 1.0
            e += 1
            for _ in range(2):
                for b in basis:
                    cand -= (b @ cand) * b
            nrm = np.linalg.norm(cand)
            if nrm > 1e-8:
                break
        cand /= nrm
        out[:, j] = cand
        basis.append(cand)
    return out


def _jacobi_tall(a: np.ndarray, tol: float, max_sweeps: int):
    g = a.copy()
    n = g.shape[1]
    v = np.eye(n)
    schedule = _round_robin(n)
    for _ in range(max_sweeps):
        rotated = False
        for p, q in schedule:
            gp, gq = g[:, p], g[:, q]
            alpha = np.einsum("ij,ij->j", gp, gp)
            beta = np.einsum("ij,ij->j", gq, gq)
            gamma = np.einsum("ij,ij->j", gp, gq)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not active.any():
                continue
            rotated = True
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            gp, gq = g[:, p], g[:, q]
            g[:, p] = c * gp - s * gq
            g[:, q] = s * gp + c * gq
            vp, vq = v[:, p], v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if not rotated:
            break
    else:
        raise RuntimeError(f"Jacobi SVD did not converge in {max_sweeps} sweeps")

    sigma = np.sqrt(np.einsum("ij,ij->j", g, g))
    order = np.argsort(-sigma, kind="stable")
    sigma, g, v = sigma[order], g[:, order], v[:, order]
    floor = (sigma[0] if sigma.size else 0.0) * np.finfo(float).eps * max(a.shape)
    valid = sigma > floor
    u = np.zeros_like(g)
    u[:, valid] = g[:, valid] / sigma[valid]
    if not valid.all():
        u = _complete_basis(u, valid)
    return u, sigma, v


def svd(w, tol: float = 1e-15, max_sweeps: int = 80) -> SpectralDecomposition:
    """Thin SVD by one-sided (Hestenes) Jacobi with a fixed round-robin order.

    Singular values come out descending; equal values keep the column order in
    which the sweep produced them. Each u-column is sign-fixed so that its
    largest-magnitude entry (lowest row index on ties) is positive, with the
    matching v-column flipped alongside.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.size == 0:
        raise ValueError(f"svd needs a non-empty 2-D matrix, got shape {w.shape}")
    check_finite(w, "svd input")
    m, n = w.shape
    if m >= n:
        u, sigma, v = _jacobi_tall(w, tol, max_sweeps)
    else:
        v, sigma, u = _jacobi_tall(w.T, tol, max_sweeps)

    pivots = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[pivots, np.arange(u.shape[1])] < 0, -1.0, 1.0)
    return SpectralDecomposition(u=u * signs, sigma=sigma, v=v * signs)
