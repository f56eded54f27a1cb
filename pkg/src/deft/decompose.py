"""Factorization backends that turn a trainable latent matrix into a
projection factor, plus a high-accuracy SVD oracle.

Every backend maps an m x r latent (or an arbitrary matrix plus a target
rank) to a ``DecompositionResult`` whose ``p_factor`` is m x r. Backends
differ in what they promise about that factor:

============  =======================================  ==================
kind          p_factor                                 aux
============  =======================================  ==================
qr            orthonormal Q with b = Q @ r_tri         r_tri (upper tri)
tsvd          top-r left singular vectors              s (1-D), v
lrmf          scaled basis U_r * sqrt(s_r)             s (1-D), v
nmf           non-negative W with b ~ W @ H            h, err_trace (1-D)
eig           top-r eigenvectors of b @ b.T            lambda (1-D)
relax         b itself, no factorization               (none)
relax_nmf     max(b, 0) elementwise                    (none)
============  =======================================  ==================

qr, tsvd and eig yield orthonormal columns; lrmf, nmf and the relax pair
deliberately do not, and nothing downstream may assume it for them.

The SVD used by tsvd/lrmf and by rank computations is the one-sided Jacobi
routine in ``deft._jacobi``, chosen for accuracy over speed at this scale.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from deft._jacobi import _fix_signs, jacobi_svd
from deft.matcore import ShapeError, as_matrix, make_rng

KINDS = ("qr", "tsvd", "lrmf", "nmf", "eig", "relax", "relax_nmf")

# Default multiplicative-update budget when a backend refactorizes a latent
# on every training step. Deliberately small: the per-step cost must sit in
# the same cheap tier as qr/relax, and a warm-ish approximate factor is all
# the adapter math needs. Standalone calls to nmf_decompose default to a
# much larger budget (see its signature).
PER_STEP_NMF_ITERS = 15


@dataclass(frozen=True)
class Backend:
    """Selects a factorization and its hyperparameters.

    rank is the number of columns of the factor the backend produces; for
    qr/relax/relax_nmf it must equal the latent's column count.
    """

    kind: str
    rank: int
    nmf_iters: int = PER_STEP_NMF_ITERS
    nmf_tol: float = 1e-6

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown backend kind {self.kind!r}, expected one of {KINDS}")
        if self.rank < 1:
            raise ValueError(f"backend rank must be >= 1, got {self.rank}")
        if self.nmf_iters < 1:
            raise ValueError(f"nmf_iters must be >= 1, got {self.nmf_iters}")
        if self.nmf_tol < 0:
            raise ValueError(f"nmf_tol must be >= 0, got {self.nmf_tol}")


@dataclass(frozen=True)
class DecompositionResult:
    kind: str
    rank: int
    p_factor: np.ndarray
    aux: dict = field(default_factory=dict)
    notes: tuple = ()


def full_svd_oracle(a):
    """Thin SVD ``a = u @ diag(s) @ v.T`` at near-machine accuracy.

    Returns
    -------
    (u, s, v)
        u: m x k, v: n x k with orthonormal columns (k = min(m, n)),
        s: 1-D, sorted non-increasing. Note v is returned untransposed,
        unlike ``numpy.linalg.svd``.
    """
    a = as_matrix(a, "a")
    return jacobi_svd(a, tol=1e-13)


def singular_values(a):
    """Singular values of `a`, non-increasing. Cheaper than the full oracle."""
    a = as_matrix(a, "a")
    return jacobi_svd(a, want_uv=False)


def qr_decompose(b):
    """Thin QR of an m x r latent, b = Q @ r_tri.

    Q always comes back with r orthonormal columns. When b is (numerically)
    rank deficient the Householder process still fills the dependent
    directions with valid orthonormal vectors; those columns carry a
    near-zero diagonal in r_tri and the result is flagged with a
    ``"degenerate_columns"`` note instead of failing, since latents start
    near zero and training has to proceed through that regime.

    Signs follow the package convention: the largest-magnitude entry of
    each Q column is non-negative.
    """
    b = as_matrix(b, "b")
    m, r = b.shape
    if m < r:
        raise ShapeError(f"qr latent must be tall or square, got {b.shape}")
    q, r_tri = np.linalg.qr(b)
    flip = np.zeros(r, dtype=bool)
    idx = np.argmax(np.abs(q), axis=0)
    flip = q[idx, np.arange(r)] < 0.0
    q[:, flip] *= -1.0
    r_tri[flip, :] *= -1.0
    diag = np.abs(np.diagonal(r_tri))
    scale = diag.max() if diag.size else 0.0
    notes = ()
    if scale == 0.0 or (diag <= 1e-12 * scale).any():
        notes = ("degenerate_columns",)
    return DecompositionResult("qr", r, q, {"r_tri": r_tri}, notes)


def truncated_svd(b, r):
    """Best rank-r approximation factors of `b` via the full SVD oracle."""
    b = as_matrix(b, "b")
    if not 1 <= r <= min(b.shape):
        raise ShapeError(f"rank {r} out of range for shape {b.shape}")
    u, s, v = full_svd_oracle(b)
    return DecompositionResult("tsvd", r, u[:, :r].copy(), {"s": s[:r].copy(), "v": v[:, :r].copy()})


def lrmf_decompose(b, r):
    """Scaled-basis factorization: p_factor = U_r * sqrt(s_r).

    A zero singular value among the top r produces a zero column; that is
    allowed and flagged with a ``"zero_singular_columns"`` note.
    """
    b = as_matrix(b, "b")
    if not 1 <= r <= min(b.shape):
        raise ShapeError(f"rank {r} out of range for shape {b.shape}")
    u, s, v = full_svd_oracle(b)
    s_r = s[:r]
    p = u[:, :r] * np.sqrt(s_r)
    cutoff = 1e-12 * s[0] if s.size else 0.0
    notes = ("zero_singular_columns",) if (s_r <= cutoff).any() else ()
    return DecompositionResult("lrmf", r, p, {"s": s_r.copy(), "v": v[:, :r].copy()}, notes)


def nmf_decompose(b, r, iters=200, tol=1e-6, seed=0):
    """Non-negative factorization b ~ W @ H by multiplicative updates.

    Negative entries of `b` are clamped to zero first (with a warning);
    the factorization is defined on the non-negative part only. Factors
    are initialized from a seeded uniform(0, 1) draw scaled by
    sqrt(mean(b) / r). The reconstruction error is non-increasing across
    iterations; iteration stops early once the relative improvement drops
    below `tol`.

    aux carries the H factor and ``err_trace``, the Frobenius error
    measured before each update round plus once after the last.
    """
    b = as_matrix(b, "b")
    m, n = b.shape
    if not 1 <= r <= min(m, n):
        raise ShapeError(f"rank {r} out of range for shape {b.shape}")
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    notes = ()
    if (b < 0.0).any():
        warnings.warn("nmf input has negative entries; clamping to zero", stacklevel=2)
        b = np.maximum(b, 0.0)
        notes = ("clamped_negative_input",)

    mean = float(b.mean())
    if mean == 0.0:  # all-zero input factorizes exactly as zero
        zero_aux = {"h": np.zeros((r, n)), "err_trace": np.zeros(1)}
        return DecompositionResult("nmf", r, np.zeros((m, r)), zero_aux, notes)

    rng = make_rng(seed)
    scale = np.sqrt(mean / r)
    w = rng.uniform(0.0, 1.0, size=(m, r)) * scale
    h = rng.uniform(0.0, 1.0, size=(r, n)) * scale

    bnorm2 = float(np.einsum("ij,ij->", b, b))
    eps = 1e-12
    trace = []
    prev = None
    for _ in range(iters):
        wtb = w.T @ b
        wtw = w.T @ w
        # error of the current (w, h) from already-needed products:
        # |b - wh|^2 = |b|^2 - 2<wtb, h> + <wtw @ h, h>
        err2 = bnorm2 - 2.0 * np.einsum("ij,ij->", wtb, h) + np.einsum("ij,ij->", wtw @ h, h)
        err = float(np.sqrt(max(err2, 0.0)))
        trace.append(err)
        if prev is not None and prev - err < tol * max(prev, eps):
            break
        prev = err
        h *= wtb / (wtw @ h + eps)
        bht = b @ h.T
        hht = h @ h.T
        w *= bht / (w @ hht + eps)
    else:
        diff = b - w @ h
        trace.append(float(np.sqrt(np.einsum("ij,ij->", diff, diff))))

    aux = {"h": h, "err_trace": np.asarray(trace)}
    return DecompositionResult("nmf", r, w, aux, notes)


def eig_project(b, r):
    """Top-r eigenvectors of b @ b.T as the projection factor.

    aux carries ``lambda``, the matching eigenvalues (non-negative, sorted
    non-increasing; they equal squared singular values of b).
    """
    b = as_matrix(b, "b")
    m = b.shape[0]
    if not 1 <= r <= m:
        raise ShapeError(f"rank {r} out of range for {m} rows")
    lam, vec = np.linalg.eigh(b @ b.T)
    lam = np.maximum(lam[::-1], 0.0)[:r]
    p = np.ascontiguousarray(vec[:, ::-1][:, :r])
    _fix_signs(p, None)
    return DecompositionResult("eig", r, p, {"lambda": lam.copy()})


def relax(b, nonneg=False):
    """No factorization: the latent is the factor.

    nonneg=True keeps only the non-negative part (elementwise max with 0).
    """
    b = as_matrix(b, "b")
    p = np.maximum(b, 0.0) if nonneg else b.copy()
    kind = "relax_nmf" if nonneg else "relax"
    return DecompositionResult(kind, b.shape[1], p)


def decompose(b, backend, seed=0):
    """Apply `backend` to latent `b`. Deterministic in (b, backend, seed).

    qr, relax and relax_nmf have intrinsic rank equal to the latent's
    column count and reject a mismatched backend.rank; the others truncate
    to backend.rank.
    """
    b = as_matrix(b, "b")
    k = backend.kind
    if k in ("qr", "relax", "relax_nmf") and backend.rank != b.shape[1]:
        raise ShapeError(
            f"{k} backend rank {backend.rank} must equal latent column count {b.shape[1]}"
        )
    if k == "qr":
        return qr_decompose(b)
    if k == "tsvd":
        return truncated_svd(b, backend.rank)
    if k == "lrmf":
        return lrmf_decompose(b, backend.rank)
    if k == "nmf":
        return nmf_decompose(b, backend.rank, iters=backend.nmf_iters, tol=backend.nmf_tol, seed=seed)
    if k == "eig":
        return eig_project(b, backend.rank)
    if k == "relax":
        return relax(b, nonneg=False)
    if k == "relax_nmf":
        return relax(b, nonneg=True)
    raise ValueError(f"unknown backend kind {k!r}")  # unreachable, Backend validates


def reconstruct(result, b=None):
    """Rank-r approximation of the factored matrix implied by `result`.

    eig reconstructs by projecting the original matrix and therefore
    needs `b`; every other kind reconstructs from its own factors.
    """
    k = result.kind
    p = result.p_factor
    if k == "qr":
        return p @ result.aux["r_tri"]
    if k == "tsvd":
        s, v = result.aux["s"], result.aux["v"]
        return p @ (s[:, None] * v.T)
    if k == "lrmf":
        s, v = result.aux["s"], result.aux["v"]
        return p @ (np.sqrt(s)[:, None] * v.T)
    if k == "nmf":
        return p @ result.aux["h"]
    if k == "eig":
        if b is None:
            raise ValueError("eig reconstruction needs the original matrix")
        return p @ (p.T @ np.asarray(b, dtype=np.float64))
    if k in ("relax", "relax_nmf"):
        return p.copy()
    raise ValueError(f"unknown result kind {k!r}")
