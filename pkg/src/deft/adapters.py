"""The three adapter mechanisms over a frozen base weight.

All three leave the m x n base matrix w0 untouched and train a small set
of extra matrices, differing in how the effective weight is assembled:

* lora:  W = w0 + (alpha / rank) * b_lo @ a, with b_lo zero-initialized so
  the adapter starts as an exact no-op.
* para:  W = w0 - Q Q^T w0, pure removal of the Q subspace from w0.
* deft:  W = w0 - P P^T w0 + P R, subspace removal plus a trainable
  low-rank replacement inside that subspace. R starts at zero, so a fresh
  deft adapter acts exactly like a para adapter with the same latent.

For para and deft, the projection factor (Q or P) is produced from a
trainable latent matrix by a decomposition backend; the factorization is
cached and recomputed whenever the latent changes (every optimizer step
marks the state stale). lora ignores the backend entirely.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from deft.decompose import Backend, DecompositionResult, decompose
from deft.matcore import ShapeError, as_matrix, freeze, gaussian, make_rng

METHODS = ("lora", "para", "deft")


class ConfigError(ValueError):
    """Invalid adapter configuration."""


@dataclass(frozen=True)
class AdapterConfig:
    """Method selection plus every knob training and persistence need.

    alpha defaults to rank, making the lora scale factor alpha/rank equal
    to 1. backend defaults to qr for para/deft and is forced to None for
    lora. lr_r must be at least lr_p: the in-subspace replacement term
    trains at a higher rate than the projection factor.
    """

    method: str
    rank: int
    alpha: float | None = None
    backend: Backend | None = None
    lr_p: float = 1e-3
    lr_r: float = 1e-2
    init_stddev: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}, expected one of {METHODS}")
        if self.rank < 1:
            raise ConfigError(f"rank must be >= 1, got {self.rank}")
        if self.alpha is None:
            object.__setattr__(self, "alpha", float(self.rank))
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if self.method == "lora":
            object.__setattr__(self, "backend", None)
        else:
            if self.backend is None:
                object.__setattr__(self, "backend", Backend("qr", self.rank))
            if self.backend.rank != self.rank:
                raise ConfigError(
                    f"backend rank {self.backend.rank} does not match adapter rank {self.rank}"
                )
        if not self.lr_p > 0:
            raise ConfigError(f"lr_p must be positive, got {self.lr_p}")
        if self.lr_r < self.lr_p:
            raise ConfigError(f"lr_r ({self.lr_r}) must be >= lr_p ({self.lr_p})")
        if self.init_stddev < 0:
            raise ConfigError(f"init_stddev must be >= 0, got {self.init_stddev}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")


@dataclass
class AdapterState:
    """Trainable state for one adapted layer.

    Unused trainables are None (a/b_lo for lora, q_latent for para,
    p_latent/r for deft). w0 is a read-only array; writes raise. cache
    holds the latent's factorization and is refreshed lazily whenever
    stale is set.
    """

    cfg: AdapterConfig
    w0: np.ndarray
    a: np.ndarray | None = None
    b_lo: np.ndarray | None = None
    q_latent: np.ndarray | None = None
    p_latent: np.ndarray | None = None
    r: np.ndarray | None = None
    cache: DecompositionResult | None = None
    stale: bool = True

    @property
    def shape(self):
        return self.w0.shape


def init_adapter(w0, cfg):
    """Fresh adapter state over frozen `w0`.

    Gaussian-initialized trainables (lora's a, the para/deft latents) use
    cfg.init_stddev and cfg.seed; zero-initialized ones (b_lo, r) make the
    adapter start as the identity update.
    """
    w0 = freeze(as_matrix(w0, "w0"))
    m, n = w0.shape
    if cfg.rank > min(m, n):
        raise ConfigError(f"rank {cfg.rank} exceeds min(m, n) = {min(m, n)} for shape {w0.shape}")
    rng = make_rng(cfg.seed)
    state = AdapterState(cfg=cfg, w0=w0)
    if cfg.method == "lora":
        state.a = gaussian(rng, cfg.rank, n, cfg.init_stddev)
        state.b_lo = np.zeros((m, cfg.rank))
    elif cfg.method == "para":
        state.q_latent = gaussian(rng, m, cfg.rank, cfg.init_stddev)
    else:
        state.p_latent = gaussian(rng, m, cfg.rank, cfg.init_stddev)
        state.r = np.zeros((cfg.rank, n))
    return state


def trainables(state):
    """Name -> array map of the trainable matrices, in a fixed order."""
    if state.cfg.method == "lora":
        return {"a": state.a, "b_lo": state.b_lo}
    if state.cfg.method == "para":
        return {"q_latent": state.q_latent}
    return {"p_latent": state.p_latent, "r": state.r}


def refresh(state):
    """Recompute the latent factorization if the cache is stale."""
    if state.cfg.method == "lora":
        return state
    if state.cache is None or state.stale:
        latent = state.q_latent if state.cfg.method == "para" else state.p_latent
        state.cache = decompose(latent, state.cfg.backend, seed=state.cfg.seed)
        state.stale = False
    return state


def projection_factor(state):
    """Current P (deft) or Q (para) from the cached factorization."""
    if state.cfg.method == "lora":
        raise ConfigError("lora has no projection factor")
    refresh(state)
    return state.cache.p_factor


def forward(state, x):
    """Apply the adapted layer to a batch x (n x k, one column per input)."""
    x = as_matrix(x, "x")
    m, n = state.w0.shape
    if x.shape[0] != n:
        raise ShapeError(f"input rows {x.shape[0]} do not match layer width {n}")
    y = state.w0 @ x
    if state.cfg.method == "lora":
        scale = state.cfg.alpha / state.cfg.rank
        return y + scale * (state.b_lo @ (state.a @ x))
    p = projection_factor(state)
    out = y - p @ (p.T @ y)
    if state.cfg.method == "deft":
        out = out + p @ (state.r @ x)
    return out


def merge(state):
    """Collapse the adapter into one explicit m x n weight matrix.

    forward(state, x) equals merge(state) @ x up to float rounding; the
    merged matrix is what would be shipped after adaptation.
    """
    w0 = state.w0
    if state.cfg.method == "lora":
        scale = state.cfg.alpha / state.cfg.rank
        return w0 + scale * (state.b_lo @ state.a)
    p = projection_factor(state)
    out = w0 - p @ (p.T @ w0)
    if state.cfg.method == "deft":
        out = out + p @ state.r
    return out


def param_count(cfg, m, n):
    """Trainable-parameter count for a cfg applied to an m x n layer.

    lora and deft both spend rank * (m + n); para spends rank * m. The
    deft/para ratio is therefore (m + n) / m regardless of rank.
    """
    if m < 1 or n < 1:
        raise ShapeError(f"matrix dims must be positive, got {m}x{n}")
    if cfg.method in ("lora", "deft"):
        return cfg.rank * (m + n)
    return cfg.rank * m
