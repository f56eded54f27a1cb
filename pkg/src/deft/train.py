"""Adapter gradients, a differential-rate SGD loop, and synthetic tasks.

Gradients are analytic for the relax backends, where the projection factor
IS the latent. For factorizing backends (qr, tsvd, ...) the same formulas
are applied straight-through: the factorization is treated as frozen
within the step, the gradient is computed with respect to the current
factor and applied to the latent. Differentiating through the
factorizations is out of scope; the relax path is the one with exact
gradients and the one the finite-difference suite certifies.

The replacement matrix R (and lora's b_lo) trains at lr_r, the projection
latent (and lora's a) at the smaller lr_p.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from deft import store
from deft.adapters import forward, init_adapter, projection_factor, refresh
from deft.matcore import as_matrix, frobenius_norm, make_rng


class DivergenceError(RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, step, last_loss):
        super().__init__(
            f"loss diverged to a non-finite value at step {step}; "
            f"last finite loss was {last_loss!r}"
        )
        self.step = step
        self.last_loss = last_loss


@dataclass
class ToyTask:
    """A linear regression target: match teacher @ inputs.

    targets may include seeded noise (noise_stddev > 0); the adapter then
    fits the noisy targets, not the teacher.
    """

    teacher: np.ndarray
    inputs: np.ndarray
    targets: np.ndarray
    noise_stddev: float = 0.0


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)  # losses[i] = loss before step i; last entry is final
    grad_norm_p: list = field(default_factory=list)
    grad_norm_r: list = field(default_factory=list)
    steps: int = 0
    final_state_hash: str = ""
    w0_hash_before: str = ""
    w0_hash_after: str = ""


def make_teacher_shift_task(w0, seed, shift_scale=1.0, input_scale=64.0, batch=None):
    """Teacher = w0 plus a unit rank-1 shift; reachable by a rank-1 update.

    The input batch is a scaled orthonormal basis of the input space, so
    the least-squares landscape is isotropic. The default input_scale is
    tuned so the 32 x 32 reference task converges under the default
    learning rates (lr_p 1e-3, lr_r 1e-2) well within 2000 steps; smaller
    scales converge too, just slower.
    """
    w0 = as_matrix(w0, "w0")
    m, n = w0.shape
    k = n if batch is None else batch
    if not 1 <= k <= n:
        raise ValueError(f"batch must be in [1, {n}], got {k}")
    rng = make_rng(seed)
    u = rng.normal(size=m)
    v = rng.normal(size=n)
    u *= shift_scale / np.linalg.norm(u)
    v /= np.linalg.norm(v)
    teacher = w0 + np.outer(u, v)
    basis, _ = np.linalg.qr(rng.normal(size=(n, n)))
    inputs = np.ascontiguousarray(input_scale * basis[:, :k])
    return ToyTask(teacher=teacher, inputs=inputs, targets=teacher @ inputs)


def make_teacher_noise_task(w0, seed, noise_stddev=0.01, input_scale=1.0, batch=None):
    """Teacher = w0 itself; targets carry additive Gaussian noise.

    The best reachable loss is the noise floor, making this a stability
    probe rather than a convergence benchmark.
    """
    w0 = as_matrix(w0, "w0")
    m, n = w0.shape
    k = n if batch is None else batch
    if not 1 <= k <= n:
        raise ValueError(f"batch must be in [1, {n}], got {k}")
    rng = make_rng(seed)
    inputs = input_scale * rng.normal(size=(n, k))
    targets = w0 @ inputs
    if noise_stddev > 0:
        targets = targets + rng.normal(0.0, noise_stddev, size=targets.shape)
    return ToyTask(teacher=w0.copy(), inputs=inputs, targets=targets, noise_stddev=noise_stddev)


def loss_mse(state, task):
    """Mean squared error of the adapted forward pass against the targets."""
    diff = forward(state, task.inputs) - task.targets
    m, k = diff.shape
    return float(np.einsum("ij,ij->", diff, diff)) / (m * k)


def _loss_and_grads(state, task):
    x = task.inputs
    h = forward(state, x)
    diff = h - task.targets
    m, k = diff.shape
    loss = float(np.einsum("ij,ij->", diff, diff)) / (m * k)
    g = (2.0 / (m * k)) * diff  # dL/dh

    cfg = state.cfg
    if cfg.method == "lora":
        scale = cfg.alpha / cfg.rank
        gxt = g @ x.T
        da = scale * (state.b_lo.T @ gxt)
        db = scale * (gxt @ state.a.T)
        return loss, {"a": da, "b_lo": db}

    p = projection_factor(state)
    y = state.w0 @ x
    dp = -(g @ y.T) @ p - (y @ g.T) @ p
    if cfg.method == "deft":
        gxt = g @ x.T
        dp = dp + gxt @ state.r.T
        dr = p.T @ gxt
    if cfg.backend.kind == "relax_nmf":
        # subgradient of max(latent, 0): zero at and below the kink
        latent = state.q_latent if cfg.method == "para" else state.p_latent
        dp = dp * (latent > 0.0)
    if cfg.method == "para":
        return loss, {"q_latent": dp}
    return loss, {"p_latent": dp, "r": dr}


def grad(state, task):
    """Gradients of loss_mse with respect to each trainable matrix.

    Keys match :func:`deft.adapters.trainables`. For relax backends these
    are exact; for factorizing backends they are the straight-through
    estimates described in the module docstring.
    """
    return _loss_and_grads(state, task)[1]


def sgd_step(state, grads, cfg):
    """One in-place SGD update; marks the factorization cache stale."""
    if cfg.method == "lora":
        state.a -= cfg.lr_p * grads["a"]
        state.b_lo -= cfg.lr_r * grads["b_lo"]
    elif cfg.method == "para":
        state.q_latent -= cfg.lr_p * grads["q_latent"]
    else:
        state.p_latent -= cfg.lr_p * grads["p_latent"]
        state.r -= cfg.lr_r * grads["r"]
    state.stale = True
    return state


def run_finetune(w0, cfg, task, steps):
    """Train a fresh adapter on `task` for `steps` SGD steps.

    Deterministic given cfg.seed. Raises DivergenceError the moment the
    loss stops being finite. The report's losses list has steps + 1
    entries: the loss before each step, then the final loss.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    state = init_adapter(w0, cfg)
    report = TrainReport(steps=steps)
    report.w0_hash_before = store.matrix_hash(state.w0).hex()

    last_finite = None
    for i in range(steps):
        loss, grads = _loss_and_grads(state, task)
        if not np.isfinite(loss):
            raise DivergenceError(i, last_finite)
        last_finite = loss
        report.losses.append(loss)
        if cfg.method == "lora":
            gp, gr = grads["a"], grads["b_lo"]
        elif cfg.method == "para":
            gp, gr = grads["q_latent"], None
        else:
            gp, gr = grads["p_latent"], grads["r"]
        report.grad_norm_p.append(frobenius_norm(gp))
        report.grad_norm_r.append(frobenius_norm(gr) if gr is not None else 0.0)
        sgd_step(state, grads, cfg)

    refresh(state)
    final = loss_mse(state, task)
    if not np.isfinite(final):
        raise DivergenceError(steps, last_finite)
    report.losses.append(final)
    report.final_state_hash = store.state_hash(state)
    report.w0_hash_after = store.matrix_hash(state.w0).hex()
    return report, state


def report_to_csv(report):
    """CSV trace: step, loss, grad norms. The final row has no gradients."""
    buf = io.StringIO()
    buf.write("step,loss,grad_norm_p,grad_norm_r\r\n")
    for i, loss in enumerate(report.losses):
        if i < len(report.grad_norm_p):
            gp = repr(report.grad_norm_p[i])
            gr = repr(report.grad_norm_r[i])
        else:
            gp = gr = ""
        buf.write(f"{i},{loss!r},{gp},{gr}\r\n")
    return buf.getvalue()


def summary_line(report):
    frozen = report.w0_hash_before == report.w0_hash_after
    return (
        f"steps={report.steps} final_loss={report.losses[-1]:.6e} "
        f"w0_frozen={str(frozen).lower()} state_hash={report.final_state_hash[:16]}"
    )
