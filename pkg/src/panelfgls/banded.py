"""Symmetric block-banded matrices with stationary blocks.

An NT x NT matrix made of T x T blocks of size N x N, where the (t, s) block
depends only on h = t - s: it is ``blocks[h]`` for 0 <= h <= L, its
transpose for -L <= h < 0, and zero otherwise.  Factorization goes through
LAPACK's banded Cholesky (scalar bandwidth (L + 1) N - 1), so the inverse is
never formed.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DataError, NotPositiveDefiniteError, NumericalError

__all__ = [
    "BlockBandedMatrix",
    "BandedCholesky",
    "assemble",
    "cholesky",
    "solve",
    "is_positive_definite",
    "min_eig_probe",
    "sym_sqrt_dense",
    "block_norm_bound",
    "write_blocks",
    "read_blocks",
]

DENSE_EIG_LIMIT = 2000
_SYM_TOL = 1e-12
BLOCK_MAGIC = b"PFGLSBLK"


@dataclass(frozen=True)
class BlockBandedMatrix:
    """Stationary symmetric block-banded matrix.

    ``blocks`` has shape (L + 1, N, N); ``blocks[h]`` is the (t, t - h) block.
    """

    blocks: np.ndarray
    n_time: int

    def __post_init__(self):
        b = np.array(self.blocks, dtype=float)
        if b.ndim == 2:
            b = b[None]
        if b.ndim != 3 or b.shape[1] != b.shape[2]:
            raise DataError(f"blocks must have shape (L+1, N, N); got {b.shape}")
        if self.n_time < 1:
            raise DataError("n_time must be positive")
        if b.shape[0] - 1 > self.n_time - 1:
            raise DataError(f"band L={b.shape[0] - 1} exceeds T-1={self.n_time - 1}")
        b0 = b[0]
        scale = max(1.0, float(np.max(np.abs(b0))) if b0.size else 1.0)
        if np.max(np.abs(b0 - b0.T), initial=0.0) > _SYM_TOL * scale:
            raise DataError("lag-0 block is not symmetric")
        b[0] = 0.5 * (b0 + b0.T)
        b.setflags(write=False)
        object.__setattr__(self, "blocks", b)

    @property
    def n_block(self) -> int:
        return self.blocks.shape[1]

    @property
    def band(self) -> int:
        return self.blocks.shape[0] - 1

    @property
    def size(self) -> int:
        return self.n_block * self.n_time

    @property
    def scalar_bandwidth(self) -> int:
        return min((self.band + 1) * self.n_block - 1, self.size - 1)

    def block(self, t: int, s: int) -> np.ndarray:
        h = t - s
        if abs(h) > self.band:
            return np.zeros((self.n_block, self.n_block))
        return self.blocks[h] if h >= 0 else self.blocks[-h].T

    def densify(self) -> np.ndarray:
        n, t = self.n_block, self.n_time
        full = np.zeros((n * t, n * t))
        for h in range(self.band + 1):
            for r in range(h, t):
                c = r - h
                full[r * n : (r + 1) * n, c * n : (c + 1) * n] = self.blocks[h]
                if h:
                    full[c * n : (c + 1) * n, r * n : (r + 1) * n] = self.blocks[h].T
        return full

    def lower_band_storage(self) -> np.ndarray:
        """LAPACK lower band storage: ``ab[r - c, c] = A[r, c]`` for r >= c."""
        n, t = self.n_block, self.n_time
        u = self.scalar_bandwidth
        ab = np.zeros((u + 1, n * t))
        a_idx, b_idx = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        for h in range(self.band + 1):
            offs = h * n + a_idx - b_idx
            keep = offs >= 0
            rows = np.arange(h, t)
            cols = (rows - h)[:, None] * n + b_idx[keep][None, :]
            ab[np.broadcast_to(offs[keep], cols.shape), cols] = self.blocks[h][keep]
        return ab

    def matvec(self, v: np.ndarray) -> np.ndarray:
        """Compute ``A @ v`` without densifying; ``v`` has NT rows."""
        v = np.asarray(v, dtype=float)
        squeeze = v.ndim == 1
        v2 = v.reshape(self.size, -1)
        n, t = self.n_block, self.n_time
        vt = v2.reshape(t, n, -1)
        out = np.einsum("ij,tjk->tik", self.blocks[0], vt)
        for h in range(1, self.band + 1):
            out[h:] += np.einsum("ij,tjk->tik", self.blocks[h], vt[:-h])
            out[:-h] += np.einsum("ji,tjk->tik", self.blocks[h], vt[h:])
        out = out.reshape(self.size, -1)
        return out[:, 0] if squeeze else out


@dataclass(frozen=True)
class BandedCholesky:
    """Lower banded Cholesky factor in LAPACK band storage."""

    factor: np.ndarray
    bandwidth: int
    logdet: float

    @property
    def size(self) -> int:
        return self.factor.shape[1]

    def dense_factor(self) -> np.ndarray:
        n, u = self.size, self.bandwidth
        low = np.zeros((n, n))
        for k in range(u + 1):
            idx = np.arange(n - k)
            low[idx + k, idx] = self.factor[k, : n - k]
        return low


def assemble(blocks, kernel_weights, n_time: int) -> BlockBandedMatrix:
    """Weight lag blocks by the kernel and wrap them as a block-banded matrix."""
    b = np.asarray(blocks, dtype=float)
    w = np.asarray(kernel_weights, dtype=float).reshape(-1)
    if b.ndim != 3 or b.shape[1] != b.shape[2]:
        raise DataError(f"blocks must have shape (L+1, N, N); got {b.shape}")
    if w.size != b.shape[0]:
        raise DataError(f"{w.size} kernel weights for {b.shape[0]} lag blocks")
    return BlockBandedMatrix(blocks=b * w[:, None, None], n_time=n_time)


_MINOR_RE = re.compile(r"(\d+)-th leading minor")


def cholesky(m: BlockBandedMatrix) -> BandedCholesky:
    """Banded Cholesky; raises NotPositiveDefiniteError on a bad pivot."""
    ab = m.lower_band_storage()
    try:
        cb = sla.cholesky_banded(ab, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        hit = _MINOR_RE.search(str(exc))
        row = int(hit.group(1)) - 1 if hit else -1
        raise NotPositiveDefiniteError(row) from None
    diag = cb[0]
    return BandedCholesky(factor=cb, bandwidth=ab.shape[0] - 1, logdet=float(2.0 * np.sum(np.log(diag))))


def is_positive_definite(m: BlockBandedMatrix) -> bool:
    try:
        cholesky(m)
    except NotPositiveDefiniteError:
        return False
    return True


def solve(f: BandedCholesky, rhs: np.ndarray) -> np.ndarray:
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape[0] != f.size:
        raise DataError(f"rhs has {rhs.shape[0]} rows; factor is {f.size} x {f.size}")
    return sla.cho_solve_banded((f.factor, True), rhs, check_finite=False)


def _to_sparse(m: BlockBandedMatrix) -> sp.csr_matrix:
    ab = m.lower_band_storage()
    n, u = m.size, ab.shape[0] - 1
    offsets = []
    diags = []
    for k in range(u + 1):
        d = ab[k, : n - k]
        diags.append(d)
        offsets.append(-k)
        if k:
            diags.append(d)
            offsets.append(k)
    return sp.diags(diags, offsets, shape=(n, n), format="csc")


def min_eig_probe(m: BlockBandedMatrix, tol: float = 1e-6, maxiter: int = 5000) -> float:
    """Smallest eigenvalue: dense when NT <= 2000, else shift-invert Lanczos.

    The shift is placed at a Gershgorin lower bound, so the eigenvalue
    nearest the shift is the smallest one.
    """
    if m.size <= DENSE_EIG_LIMIT:
        return float(np.linalg.eigvalsh(m.densify())[0])
    a = _to_sparse(m)
    absrow = np.asarray(abs(a).sum(axis=1)).ravel()
    diag = a.diagonal()
    gersh = float(np.min(2 * diag - absrow))
    sigma = gersh - 1e-3 * max(1.0, abs(gersh))
    try:
        vals = spla.eigsh(a, k=1, sigma=sigma, which="LM", tol=tol, maxiter=maxiter, return_eigenvectors=False)
    except spla.ArpackNoConvergence as exc:
        best = exc.eigenvalues[0] if len(exc.eigenvalues) else float("nan")
        raise NumericalError(
            f"smallest-eigenvalue iteration did not converge; bracket [{gersh:.6g}, {best:.6g}]"
        ) from None
    return float(vals[0])


def sym_sqrt_dense(m: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition.

    Eigenvalues down to -1e-10 (relative to the spectral radius) are treated
    as round-off and clipped at zero.
    """
    a = np.asarray(m, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DataError(f"square matrix required; got shape {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a))) if a.size else 1.0)
    if np.max(np.abs(a - a.T), initial=0.0) > 1e-10 * scale:
        raise DataError("matrix is not symmetric")
    vals, vecs = np.linalg.eigh(0.5 * (a + a.T))
    radius = max(1.0, float(np.max(np.abs(vals))))
    if vals[0] < -1e-10 * radius:
        raise NumericalError(f"matrix is not PSD (smallest eigenvalue {vals[0]:.3e})")
    root = np.sqrt(np.clip(vals, 0.0, None))
    return (vecs * root) @ vecs.T


def block_norm_bound(m: BlockBandedMatrix) -> float:
    """max over block rows t of the sum of block operator norms in row t.

    For any symmetric block matrix this bounds the operator norm from above.
    """
    norms = np.array([np.linalg.norm(b, 2) for b in m.blocks])
    t_idx = np.arange(m.n_time)
    row_sums = np.full(m.n_time, norms[0])
    for h in range(1, m.band + 1):
        row_sums += norms[h] * ((t_idx - h >= 0).astype(float) + (t_idx + h <= m.n_time - 1))
    return float(np.max(row_sums))


def write_blocks(path: str | Path, m: BlockBandedMatrix) -> None:
    """Binary dump: magic, then N, T, L as little-endian int64, then the
    blocks lag-major and row-major as little-endian float64."""
    with open(path, "wb") as fh:
        fh.write(BLOCK_MAGIC)
        fh.write(struct.pack("<qqq", m.n_block, m.n_time, m.band))
        fh.write(np.ascontiguousarray(m.blocks, dtype="<f8").tobytes())


def read_blocks(path: str | Path) -> BlockBandedMatrix:
    raw = Path(path).read_bytes()
    if raw[:8] != BLOCK_MAGIC:
        raise DataError(f"{path}: not a block dump (bad magic)")
    n, t, band = struct.unpack("<qqq", raw[8:32])
    data = np.frombuffer(raw[32:], dtype="<f8")
    if data.size != (band + 1) * n * n:
        raise DataError(f"{path}: truncated block dump")
    return BlockBandedMatrix(blocks=data.reshape(band + 1, n, n).astype(float), n_time=t)
