"""Column-space checks for the adapter update rules, plus a displacement
field probe for visualizing what the update does to inputs.

The three facts these helpers make executable:

1. For orthonormal q, any w splits exactly into w = q q^T w + (I - q q^T) w.
2. The reduced weight (I - q q^T) w0 never leaves col(w0), and the merged
   adapted weight never leaves col(w0) + col(q).
3. With a q direction outside col(w0) and a nonzero replacement term, the
   merged weight's column space strictly extends col(w0).

Rank comparisons run at a caller-chosen relative tolerance; test matrices
are constructed with singular-value gaps far above it so the integer rank
answers are unambiguous.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from deft import adapters
from deft.matcore import as_matrix, frobenius_norm, numerical_rank


@dataclass
class SubspaceReport:
    rank_w0: int
    rank_reduce: int
    rank_total: int
    rank_union: int
    containment_holds: bool
    extension_holds: bool
    residuals: dict


@dataclass
class DisplacementField:
    """Per-grid-point displacement (merged minus base weight, applied to x).

    displacements_full uses the state's projection factor as-is;
    displacements_nonneg substitutes its non-negative part max(P, 0),
    probing how much of the update survives when P is restricted to its
    non-negative shadow.
    """

    grid_points: np.ndarray  # g x 2
    displacements_full: np.ndarray  # g x m
    displacements_nonneg: np.ndarray  # g x m


def verify_decomposition_identity(w, q):
    """Relative residual of the split w = q q^T w + (I - q q^T) w.

    Requires q to have orthonormal columns (checked to 1e-8); the
    returned residual is exact-zero algebra, so anything above ~1e-12
    signals a broken projector.
    """
    w = as_matrix(w, "w")
    q = as_matrix(q, "q")
    gram_dev = frobenius_norm(q.T @ q - np.eye(q.shape[1]))
    if gram_dev > 1e-8:
        raise ValueError(f"q columns are not orthonormal: |q^T q - I| = {gram_dev:.3e}")
    qtw = q.T @ w
    split = q @ qtw + (w - q @ qtw)
    denom = frobenius_norm(w)
    resid = frobenius_norm(w - split)
    return resid / denom if denom > 0.0 else resid


def check_containment(w0, q, w_total, tol=1e-8):
    """Rank evidence that w_total stays inside col(w0) + col(q).

    containment_holds compares rank([w0 | q]) with rank([w0 | q | w_total]);
    the theorem says they are equal for any adapter output. extension_holds
    reports whether col(w_total) strictly extends col(w0), which needs a q
    direction outside col(w0) and a nonzero replacement term.

    q may be any m x r matrix (orthonormality is not assumed; relax-style
    factors are legal). The residuals map carries the raw rank of the
    largest stack for reporting.
    """
    w0 = as_matrix(w0, "w0")
    q = as_matrix(q, "q")
    w_total = as_matrix(w_total, "w_total")
    w_reduce = w0 - q @ (q.T @ w0)

    rank_w0 = numerical_rank(w0, tol)
    rank_reduce = numerical_rank(w_reduce, tol)
    rank_total = numerical_rank(w_total, tol)
    rank_union = numerical_rank(np.hstack([w0, q]), tol)
    rank_union_total = numerical_rank(np.hstack([w0, q, w_total]), tol)
    rank_w0_total = numerical_rank(np.hstack([w0, w_total]), tol)

    return SubspaceReport(
        rank_w0=rank_w0,
        rank_reduce=rank_reduce,
        rank_total=rank_total,
        rank_union=rank_union,
        containment_holds=rank_union_total == rank_union,
        extension_holds=rank_w0_total > rank_w0,
        residuals={
            "rank_union_with_total": float(rank_union_total),
            "rank_w0_with_total": float(rank_w0_total),
            "containment_rank_gap": float(rank_union_total - rank_union),
        },
    )


def make_grid(lo=-1.0, hi=1.0, n=21):
    """n x n grid over [lo, hi]^2, row-major, as a (n*n) x 2 array."""
    if n < 1:
        raise ValueError(f"grid size must be >= 1, got {n}")
    ticks = np.linspace(lo, hi, n)
    xx, yy = np.meshgrid(ticks, ticks, indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel()])


def displacement_field(state, lo=-1.0, hi=1.0, n=21):
    """Displacement (merge(state) - w0) @ x over a 2-D input grid.

    For layers wider than 2 inputs the grid lives in the first two input
    coordinates and the remaining ones are held at zero. The nonneg field
    replaces the projection factor P with max(P, 0) before merging; for
    lora states there is no P, so both fields coincide by construction.
    """
    grid = make_grid(lo, hi, n)
    m, width = state.w0.shape
    delta_full = adapters.merge(state) - state.w0
    if state.cfg.method == "lora":
        delta_nonneg = delta_full
    else:
        p = adapters.projection_factor(state)
        p_nn = np.maximum(p, 0.0)
        delta_nonneg = -p_nn @ (p_nn.T @ state.w0)
        if state.cfg.method == "deft":
            delta_nonneg = delta_nonneg + p_nn @ state.r

    x = np.zeros((width, grid.shape[0]))
    x[0, :] = grid[:, 0]
    if width > 1:
        x[1, :] = grid[:, 1]
    return DisplacementField(
        grid_points=grid,
        displacements_full=(delta_full @ x).T,
        displacements_nonneg=(delta_nonneg @ x).T,
    )


def field_summary(field):
    """Mean and max displacement norms for both field variants.

    The non-negative shadow usually displaces less and more selectively;
    that is an empirical tendency, reported here but never asserted.
    """
    norm_full = np.linalg.norm(field.displacements_full, axis=1)
    norm_nn = np.linalg.norm(field.displacements_nonneg, axis=1)
    return {
        "mean_full": float(norm_full.mean()),
        "max_full": float(norm_full.max()),
        "mean_nonneg": float(norm_nn.mean()),
        "max_nonneg": float(norm_nn.max()),
    }


def field_to_csv(field):
    """RFC-4180-style CSV: one row per grid point."""
    m = field.displacements_full.shape[1]
    cols = ["x0", "x1"]
    cols += [f"full_{i}" for i in range(m)]
    cols += [f"nonneg_{i}" for i in range(m)]
    buf = io.StringIO()
    buf.write(",".join(cols) + "\r\n")
    for g, df, dn in zip(field.grid_points, field.displacements_full, field.displacements_nonneg):
        row = [repr(float(v)) for v in (*g, *df, *dn)]
        buf.write(",".join(row) + "\r\n")
    return buf.getvalue()


def reports_to_csv(reports):
    """One CSV row per SubspaceReport, residual keys expanded to columns."""
    if not reports:
        return "trial\r\n"
    res_keys = sorted(reports[0].residuals)
    cols = ["trial", "rank_w0", "rank_reduce", "rank_total", "rank_union",
            "containment_holds", "extension_holds"] + res_keys
    buf = io.StringIO()
    buf.write(",".join(cols) + "\r\n")
    for i, rep in enumerate(reports):
        row = [str(i), str(rep.rank_w0), str(rep.rank_reduce), str(rep.rank_total),
               str(rep.rank_union), str(rep.containment_holds).lower(),
               str(rep.extension_holds).lower()]
        row += [repr(float(rep.residuals[k])) for k in res_keys]
        buf.write(",".join(row) + "\r\n")
    return buf.getvalue()
