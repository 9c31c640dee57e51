"""Data-dependent tempered selection (DDTS) gated state-space kernel.

The recurrent hidden state S is an n x m matrix updated per step as

    S_t = (alpha_t^T 1_m) . S_{t-1} + (alpha_hat_t^T beta_hat_t) . (k_t^T v_t)
    o_t = q_t S_t

with alpha_t = exp(-g_t . tau_t) and alpha_hat_t = g_t^tau_t, where g_t is a
softplus selection gate and tau_t a sigmoid temperature gate; beta_hat_t is a
sigmoid value-selection gate from a low-rank projection.  The decay along the
m axis is hard-wired to 1.

Three mutually equivalent execution forms are provided: a sequential scan
(O(1) state for decoding), a fully parallel form, and a chunkwise form that
runs the parallel computation inside fixed-length chunks and carries state
between chunks.  Decay ratios in the parallel path are always formed in log
space as exp of cumulative-sum differences under the causal mask, so no
division by a vanishing cumulative product ever happens and long sequences
cannot overflow.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .rng import Rng
from .tensor import (
    Tensor,
    check_finite,
    clip_min,
    concat,
    cumsum,
    matmul,
    mul,
    reshape,
    sigmoid,
    softplus,
    stack,
    swapaxes,
    texp,
    tlog,
    tsum,
)

GATE_MODES = ("full", "g_only", "none")

# floor for g before log, so alpha_hat = exp(tau * log g) never sees log(0)
GATE_FLOOR = 1e-12


@dataclass
class GateParams:
    """Learnable projections behind the three DDTS gates.

    g and tau are read from the convolved stream (width m); beta_hat is read
    from the raw stream (width d_in) through a rank-l bottleneck.
    """

    w_g: Tensor  # [m, n]
    b_g: Tensor  # [n]
    w_tau: Tensor  # [m, n]
    b_tau: Tensor  # [n]
    w_beta1: Tensor  # [d_in, l]
    w_beta2: Tensor  # [l, m]
    b_beta: Tensor  # [m]

    @property
    def low_rank(self) -> int:
        return self.w_beta1.shape[1]

    @staticmethod
    def init(
        m: int, n: int, d_in: int, low_rank: int, rng: Rng, std: float = 0.02, g_init: float = 1.0
    ) -> "GateParams":
        if low_rank >= m:
            raise ConfigError(f"low-rank width {low_rank} must be < m={m}")
        if g_init <= 0:
            raise ConfigError(f"g_init must be > 0, got {g_init}")
        # b_g = softplus^-1(g_init) so the initial selection gate sits at g_init.
        # g_init controls initial retention: alpha ~= exp(-g_init/2) per step, so
        # recall tasks over long gaps want g_init well below 1.
        b_g0 = float(np.log(np.expm1(g_init)))
        return GateParams(
            w_g=Tensor(rng.trunc_normal((m, n), std), requires_grad=True),
            b_g=Tensor(np.full(n, b_g0), requires_grad=True),
            w_tau=Tensor(rng.trunc_normal((m, n), std), requires_grad=True),
            b_tau=Tensor(np.zeros(n), requires_grad=True),
            w_beta1=Tensor(rng.trunc_normal((d_in, low_rank), std), requires_grad=True),
            w_beta2=Tensor(rng.trunc_normal((low_rank, m), std), requires_grad=True),
            b_beta=Tensor(np.zeros(m), requires_grad=True),
        )

    def named(self, prefix: str):
        yield f"{prefix}.w_g", self.w_g, False
        yield f"{prefix}.b_g", self.b_g, True
        yield f"{prefix}.w_tau", self.w_tau, False
        yield f"{prefix}.b_tau", self.b_tau, True
        yield f"{prefix}.w_beta1", self.w_beta1, False
        yield f"{prefix}.w_beta2", self.w_beta2, False
        yield f"{prefix}.b_beta", self.b_beta, True


@dataclass
class Activations:
    """Per-step gate values over a sequence; all tensors share leading dims [.., T]."""

    alpha: Tensor  # [.., T, n], in (0, 1)
    alpha_hat: Tensor  # [.., T, n], > 0
    beta_hat: Tensor  # [.., T, m], in (0, 1)
    log_alpha: Tensor  # [.., T, n] = -g . tau, kept for log-space decay
    g: Tensor | None = None
    tau: Tensor | None = None

    @staticmethod
    def identity(shape_n: tuple, m: int) -> "Activations":
        """Gates forced to the vanilla linear-attention limit (alpha=1, hats=1)."""
        ones_n = Tensor(np.ones(shape_n))
        ones_m = Tensor(np.ones(shape_n[:-1] + (m,)))
        return Activations(
            alpha=ones_n,
            alpha_hat=Tensor(np.ones(shape_n)),
            beta_hat=ones_m,
            log_alpha=Tensor(np.zeros(shape_n)),
        )


def compute_gates(x_conv: Tensor, x_raw: Tensor, p: GateParams, gate_mode: str = "full") -> Activations:
    """Evaluate the DDTS gates for a whole sequence.

    ``x_conv`` is the ShortConv output (width m) feeding g and tau; ``x_raw``
    is the unconvolved stream feeding beta_hat.  ``gate_mode`` supports the
    ablation variants: "g_only" pins tau = 1 and beta_hat = 1, "none" turns
    the kernel into ungated linear attention.
    """
    if gate_mode not in GATE_MODES:
        raise ConfigError(f"gate_mode must be one of {GATE_MODES}, got {gate_mode!r}")
    n = p.w_g.shape[1]
    m = p.w_beta2.shape[1]
    if gate_mode == "none":
        return Activations.identity(x_conv.shape[:-1] + (n,), m)

    g = softplus(matmul(x_conv, p.w_g) + p.b_g)
    if gate_mode == "g_only":
        log_alpha = -g
        alpha = texp(log_alpha)
        alpha_hat = clip_min(g, GATE_FLOOR)
        beta_hat = Tensor(np.ones(x_conv.shape[:-1] + (m,)))
        return Activations(alpha=alpha, alpha_hat=alpha_hat, beta_hat=beta_hat, log_alpha=log_alpha, g=g)

    tau = sigmoid(matmul(x_conv, p.w_tau) + p.b_tau)
    log_alpha = -mul(g, tau)
    alpha = texp(log_alpha)
    alpha_hat = texp(mul(tau, tlog(clip_min(g, GATE_FLOOR))))
    beta_hat = sigmoid(matmul(matmul(x_raw, p.w_beta1), p.w_beta2) + p.b_beta)
    return Activations(alpha=alpha, alpha_hat=alpha_hat, beta_hat=beta_hat, log_alpha=log_alpha, g=g, tau=tau)


# -- recurrent form -----------------------------------------------------------


def ddts_recurrent_step(
    s_prev: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    alpha: Tensor,
    alpha_hat: Tensor,
    beta_hat: Tensor,
) -> tuple[Tensor, Tensor]:
    """One step of the recurrence; q/k are [.., n], v is [.., m], state [.., n, m].

    The caller is expected to have unit-normalized k and scaled q by 1/sqrt(n).
    """
    for name, t in (("S", s_prev), ("q", q), ("k", k), ("v", v)):
        check_finite(t, name)
    n = q.shape[-1]
    m = v.shape[-1]
    a_col = reshape(alpha, alpha.shape + (1,))
    write_k = reshape(mul(alpha_hat, k), k.shape + (1,))  # [.., n, 1]
    write_v = reshape(mul(beta_hat, v), v.shape[:-1] + (1, m))  # [.., 1, m]
    s_next = mul(a_col, s_prev) + mul(write_k, write_v)
    q_row = reshape(q, q.shape[:-1] + (1, n))
    o = reshape(matmul(q_row, s_next), q.shape[:-1] + (m,))
    return s_next, o


def zero_state(batch_shape: tuple, n: int, m: int) -> Tensor:
    return Tensor(np.zeros(batch_shape + (n, m)))


def ddts_scan(
    q: Tensor, k: Tensor, v: Tensor, acts: Activations, s0: Tensor | None = None
) -> tuple[Tensor, Tensor]:
    """Sequential fold of the recurrence over [.., T, *] inputs.

    Memory excluding outputs is O(n*m); returns every per-step output plus the
    final state.
    """
    T = q.shape[-2]
    n = q.shape[-1]
    m = v.shape[-1]
    s = s0 if s0 is not None else zero_state(q.shape[:-2], n, m)
    outs = []
    for t in range(T):
        idx = (Ellipsis, t, slice(None))
        s, o = ddts_recurrent_step(
            s, q[idx], k[idx], v[idx], acts.alpha[idx], acts.alpha_hat[idx], acts.beta_hat[idx]
        )
        outs.append(o)
    return stack(outs, axis=-2), s


# -- parallel and chunkwise forms ---------------------------------------------


def _causal_logmask(T: int, dtype) -> np.ndarray:
    mask = np.zeros((T, T, 1), dtype=dtype)
    mask[np.triu_indices(T, k=1)[0], np.triu_indices(T, k=1)[1], :] = -np.inf
    return mask


def _parallel_block(
    q: Tensor, k: Tensor, v: Tensor, log_alpha: Tensor, alpha_hat: Tensor, beta_hat: Tensor, s0: Tensor | None
) -> tuple[Tensor, Tensor]:
    """Parallel evaluation of one contiguous span, carrying an entry state.

    Decay between positions i <= t enters as exp(L_t - L_i) with L the
    cumulative sum of log alpha, evaluated only under the causal mask.
    """
    T = q.shape[-2]
    n = q.shape[-1]
    m = v.shape[-1]
    lead = q.shape[:-2]
    L = cumsum(log_alpha, axis=-2)  # [.., T, n]
    Lq = reshape(L, lead + (T, 1, n))
    Lk = reshape(L, lead + (1, T, n))
    decay = texp(Lq - Lk + Tensor(_causal_logmask(T, L.data.dtype)))  # [.., T, T, n]
    kh = mul(k, alpha_hat)
    qe = reshape(q, lead + (T, 1, n))
    ke = reshape(kh, lead + (1, T, n))
    scores = tsum(mul(mul(qe, ke), decay), axis=-1)  # [.., T, T]
    vb = mul(v, beta_hat)
    out = matmul(scores, vb)  # [.., T, m]
    decay_all = texp(L)  # prefix decay including the step itself
    if s0 is not None:
        out = out + matmul(mul(q, decay_all), s0)
    # final state: suffix-decayed writes, plus the fully decayed entry state
    last = L[(Ellipsis, slice(T - 1, T), slice(None))]  # [.., 1, n]
    w = mul(texp(last - L), kh)  # [.., T, n]
    s_out = matmul(swapaxes(w, -1, -2), vb)  # [.., n, m]
    if s0 is not None:
        s_out = s_out + mul(reshape(texp(last), lead + (n, 1)), s0)
    return out, s_out


def ddts_parallel(
    q: Tensor, k: Tensor, v: Tensor, acts: Activations, s0: Tensor | None = None
) -> tuple[Tensor, Tensor]:
    """Quadratic-time masked-matrix form; equals the scan up to rounding."""
    for name, t in (("q", q), ("k", k), ("v", v)):
        check_finite(t, name)
    return _parallel_block(q, k, v, acts.log_alpha, acts.alpha_hat, acts.beta_hat, s0)


@dataclass
class ChunkPlan:
    """Chunk boundaries plus per-chunk cumulative log-decay (diagnostic)."""

    chunk_len: int
    bounds: list[tuple[int, int]] = field(default_factory=list)
    log_decay_cumsum: list[np.ndarray] = field(default_factory=list)

    @property
    def num_chunks(self) -> int:
        return len(self.bounds)


def plan_chunks(log_alpha: np.ndarray, chunk_len: int) -> ChunkPlan:
    T = log_alpha.shape[-2]
    if chunk_len < 1:
        raise ConfigError(f"chunk length must be >= 1, got {chunk_len}")
    plan = ChunkPlan(chunk_len=chunk_len)
    for start in range(0, T, chunk_len):
        end = min(start + chunk_len, T)
        plan.bounds.append((start, end))
        plan.log_decay_cumsum.append(np.cumsum(log_alpha[..., start:end, :], axis=-2))
    return plan


def ddts_chunkwise(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    acts: Activations,
    s0: Tensor | None = None,
    chunk_len: int = 16,
) -> tuple[Tensor, Tensor]:
    """Chunked execution: parallel inside each chunk, recurrent across chunks.

    The final chunk may be shorter than ``chunk_len``; the result matches the
    scan for every chunk length.
    """
    for name, t in (("q", q), ("k", k), ("v", v)):
        check_finite(t, name)
    T = q.shape[-2]
    plan = plan_chunks(acts.log_alpha.data, chunk_len)
    s = s0
    outs = []
    for start, end in plan.bounds:
        idx = (Ellipsis, slice(start, end), slice(None))
        o, s = _parallel_block(
            q[idx], k[idx], v[idx], acts.log_alpha[idx], acts.alpha_hat[idx], acts.beta_hat[idx], s
        )
        outs.append(o)
    if s is None:
        s = zero_state(q.shape[:-2], q.shape[-1], v.shape[-1])
    return concat(outs, axis=-2), s


# -- selection property -------------------------------------------------------


def selection_derivative_product(eta):
    """d/deta[exp(-softplus(eta))] * d/deta[softplus(eta)] = -sigma^2 (1 - sigma).

    Strictly negative for every finite eta, which is the defining condition of
    a selection mechanism: the state-retention and input-admission gates move
    in opposite directions.
    """
    eta = np.asarray(eta, dtype=np.float64)
    s = np.empty_like(eta)
    pos = eta >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
    ex = np.exp(eta[~pos])
    s[~pos] = ex / (1.0 + ex)
    out = -(s * s) * (1.0 - s)
    return out if out.ndim else float(out)
