"""Layer assembly: the Rodimus block (GLU-fused DDTS) and the Rodimus+ block
(Rodimus -> sliding-window SKA -> FFN with a two-hop residual).

A Rodimus block widens the stream d -> m = e*d, runs a depthwise ShortConv
and the DDTS state-space kernel on the wide stream, adds a learned
feedthrough, post-normalizes, gates through a GLU branch and projects back to
d.  Streaming decode carries only the n x m recurrent state plus the conv
tail, so per-step cost and memory are independent of history length.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionParams, KVWindowCache, MaskSpec, attention_forward
from .ddts import (
    Activations,
    GateParams,
    compute_gates,
    ddts_chunkwise,
    ddts_parallel,
    ddts_scan,
)
from .errors import ConfigError
from .rng import Rng
from .tensor import (
    Tensor,
    causal_conv1d,
    concat,
    l2_normalize,
    matmul,
    mul,
    reshape,
    rmsnorm,
    silu,
    softmax_lastdim,
    stack,
    swapaxes,
)

EXEC_FORMS = ("scan", "parallel", "chunkwise")


def ffn_width(d: int) -> int:
    """GLU FFN inner width sized so its three matrices total ~4*d^2."""
    return max(8, int(round(4 * d / 3 / 8)) * 8)


@dataclass
class RodimusBlockParams:
    in_gain: Tensor  # [d] pre-norm gain, applied by the caller's residual wrapper
    w_up_v: Tensor  # [d, m] value-branch up projection
    w_up_gate: Tensor  # [d, m] GLU output-gate branch
    w_q: Tensor  # [d, n]
    w_k: Tensor  # [d, n]
    conv_kernel: Tensor  # [w_c, m]
    conv_bias: Tensor  # [m]
    gates: GateParams
    d_feed: Tensor  # [m] feedthrough
    norm_gain: Tensor  # [m] post-SSM RMSNorm gain
    w_down: Tensor  # [m, d]
    beta_from: str = "raw"  # beta_hat input: raw block input or conv output
    gate_mode: str = "full"

    @property
    def d(self) -> int:
        return self.w_up_v.shape[0]

    @property
    def m(self) -> int:
        return self.w_up_v.shape[1]

    @property
    def n(self) -> int:
        return self.w_q.shape[1]

    @property
    def conv_width(self) -> int:
        return self.conv_kernel.shape[0]

    @staticmethod
    def init(
        d: int,
        n: int,
        low_rank: int,
        rng: Rng,
        expansion: int = 2,
        conv_width: int = 4,
        beta_from: str = "raw",
        gate_mode: str = "full",
        std: float = 0.02,
        g_init: float = 1.0,
    ) -> "RodimusBlockParams":
        if conv_width < 1:
            raise ConfigError(f"conv width must be >= 1, got {conv_width}")
        if beta_from not in ("raw", "conv"):
            raise ConfigError(f"beta_from must be 'raw' or 'conv', got {beta_from!r}")
        m = expansion * d
        d_in = d if beta_from == "raw" else m
        # identity-biased conv init: last tap 1 so the conv starts as a passthrough
        kernel = np.zeros((conv_width, m))
        kernel[-1, :] = 1.0
        return RodimusBlockParams(
            in_gain=Tensor(np.ones(d), requires_grad=True),
            w_up_v=Tensor(rng.trunc_normal((d, m), std), requires_grad=True),
            w_up_gate=Tensor(rng.trunc_normal((d, m), std), requires_grad=True),
            w_q=Tensor(rng.trunc_normal((d, n), std), requires_grad=True),
            w_k=Tensor(rng.trunc_normal((d, n), std), requires_grad=True),
            conv_kernel=Tensor(kernel, requires_grad=True),
            conv_bias=Tensor(np.zeros(m), requires_grad=True),
            gates=GateParams.init(m, n, d_in, low_rank, rng, std, g_init),
            d_feed=Tensor(np.ones(m), requires_grad=True),
            norm_gain=Tensor(np.ones(m), requires_grad=True),
            w_down=Tensor(np.zeros((m, d)), requires_grad=True),
            beta_from=beta_from,
            gate_mode=gate_mode,
        )

    def named(self, prefix: str):
        yield f"{prefix}.in_gain", self.in_gain, True
        yield f"{prefix}.w_up_v", self.w_up_v, False
        yield f"{prefix}.w_up_gate", self.w_up_gate, False
        yield f"{prefix}.w_q", self.w_q, False
        yield f"{prefix}.w_k", self.w_k, False
        yield f"{prefix}.conv_kernel", self.conv_kernel, False
        yield f"{prefix}.conv_bias", self.conv_bias, True
        yield from self.gates.named(f"{prefix}.gates")
        yield f"{prefix}.d_feed", self.d_feed, True
        yield f"{prefix}.norm_gain", self.norm_gain, True
        yield f"{prefix}.w_down", self.w_down, False

    def count(self) -> int:
        return sum(t.size for _, t, _ in self.named("b"))


@dataclass
class BlockState:
    """Fixed-size carry for one Rodimus block (plus window cache in Rodimus+)."""

    s: Tensor  # [.., n, m]
    conv_tail: Tensor  # [.., w_c - 1, m]
    window: KVWindowCache | None = None

    def float_count(self) -> int:
        total = int(self.s.size) + int(self.conv_tail.size)
        if self.window is not None:
            total += self.window.float_count()
        return total


def initial_state(p: RodimusBlockParams, batch_shape: tuple = ()) -> BlockState:
    return BlockState(
        s=Tensor(np.zeros(batch_shape + (p.n, p.m))),
        conv_tail=Tensor(np.zeros(batch_shape + (p.conv_width - 1, p.m))),
    )


def rodimus_block_forward(
    x: Tensor,
    p: RodimusBlockParams,
    s0: BlockState | None = None,
    exec_form: str = "chunkwise",
    chunk_len: int = 16,
) -> tuple[Tensor, BlockState]:
    """One Rodimus block on [.., T, d] input (already normalized by the caller).

    Returns the block output (the caller adds the residual) and the carried
    state for streaming continuation.
    """
    if exec_form not in EXEC_FORMS:
        raise ConfigError(f"exec form must be one of {EXEC_FORMS}, got {exec_form!r}")
    if s0 is None:
        s0 = initial_state(p, x.shape[:-2])
    n = p.n
    wide = matmul(x, p.w_up_v)  # [.., T, m]
    conv_out = causal_conv1d(wide, p.conv_kernel, p.conv_bias, init=s0.conv_tail)
    xp = silu(conv_out)
    q = mul(matmul(x, p.w_q), 1.0 / np.sqrt(n))
    k = l2_normalize(matmul(x, p.w_k))
    beta_src = x if p.beta_from == "raw" else xp
    acts = compute_gates(xp, beta_src, p.gates, p.gate_mode)
    if exec_form == "scan":
        o_core, s_t = ddts_scan(q, k, wide, acts, s0.s)
    elif exec_form == "parallel":
        o_core, s_t = ddts_parallel(q, k, wide, acts, s0.s)
    else:
        o_core, s_t = ddts_chunkwise(q, k, wide, acts, s0.s, chunk_len)
    o = o_core + mul(p.d_feed, xp)
    o = rmsnorm(o, p.norm_gain)
    o = mul(o, silu(matmul(x, p.w_up_gate)))
    y = matmul(o, p.w_down)
    w_c = p.conv_width
    if w_c > 1:
        tail_src = concat([s0.conv_tail, wide], axis=-2)
        new_tail = tail_src[(Ellipsis, slice(tail_src.shape[-2] - (w_c - 1), None), slice(None))]
    else:
        new_tail = s0.conv_tail
    return y, BlockState(s=s_t, conv_tail=new_tail.detach(), window=s0.window)


@dataclass
class FfnParams:
    w_in: Tensor  # [d, f]
    w_gate: Tensor  # [d, f]
    w_out: Tensor  # [f, d]

    @staticmethod
    def init(d: int, rng: Rng, std: float = 0.02) -> "FfnParams":
        f = ffn_width(d)
        return FfnParams(
            w_in=Tensor(rng.trunc_normal((d, f), std), requires_grad=True),
            w_gate=Tensor(rng.trunc_normal((d, f), std), requires_grad=True),
            w_out=Tensor(np.zeros((f, d)), requires_grad=True),
        )

    def named(self, prefix: str):
        yield f"{prefix}.w_in", self.w_in, False
        yield f"{prefix}.w_gate", self.w_gate, False
        yield f"{prefix}.w_out", self.w_out, False

    def count(self) -> int:
        return self.w_in.size + self.w_gate.size + self.w_out.size


def ffn_forward(x: Tensor, p: FfnParams) -> Tensor:
    return matmul(mul(silu(matmul(x, p.w_in)), matmul(x, p.w_gate)), p.w_out)


@dataclass
class RodimusPlusBlockParams:
    rodimus: RodimusBlockParams
    attn: AttentionParams  # SKA
    ffn: FfnParams
    attn_gain: Tensor  # [d]
    ffn_gain: Tensor  # [d]
    window: int = 32
    two_hop: bool = True
    rodimus_first: bool = True

    @property
    def d(self) -> int:
        return self.rodimus.d

    @staticmethod
    def init(
        d: int,
        n: int,
        low_rank: int,
        h: int,
        window: int,
        rng: Rng,
        expansion: int = 2,
        conv_width: int = 4,
        beta_from: str = "raw",
        gate_mode: str = "full",
        two_hop: bool = True,
        rodimus_first: bool = True,
        std: float = 0.02,
        g_init: float = 1.0,
    ) -> "RodimusPlusBlockParams":
        if d % h != 0:
            raise ConfigError(f"head count {h} must divide model dim {d}")
        d_h = d // h
        attn = AttentionParams.init("ska", d, h, d_h, rng, std=std)
        # zero-out the attention output projection so a fresh block is a pure residual
        attn.w_o = Tensor(np.zeros((h * d_h, d)), requires_grad=True)
        return RodimusPlusBlockParams(
            rodimus=RodimusBlockParams.init(
                d, n, low_rank, rng, expansion, conv_width, beta_from, gate_mode, std, g_init
            ),
            attn=attn,
            ffn=FfnParams.init(d, rng, std),
            attn_gain=Tensor(np.ones(d), requires_grad=True),
            ffn_gain=Tensor(np.ones(d), requires_grad=True),
            window=window,
            two_hop=two_hop,
            rodimus_first=rodimus_first,
        )

    def named(self, prefix: str):
        yield from self.rodimus.named(f"{prefix}.rodimus")
        yield from self.attn.named(f"{prefix}.attn")
        yield from self.ffn.named(f"{prefix}.ffn")
        yield f"{prefix}.attn_gain", self.attn_gain, True
        yield f"{prefix}.ffn_gain", self.ffn_gain, True

    def count(self) -> int:
        return sum(t.size for _, t, _ in self.named("b"))


def _attn_ffn_unit(x: Tensor, p: RodimusPlusBlockParams, residual: Tensor) -> Tensor:
    """SW-SKA then FFN; both hops add ``residual`` when two_hop is enabled."""
    mask = MaskSpec("sliding_window", p.window)
    y_hat = attention_forward(rmsnorm(x, p.attn_gain), p.attn, mask) + residual
    ffn_res = residual if p.two_hop else y_hat
    return ffn_forward(rmsnorm(y_hat, p.ffn_gain), p.ffn) + ffn_res


def rodimus_plus_block_forward(
    x: Tensor,
    p: RodimusPlusBlockParams,
    s0: BlockState | None = None,
    exec_form: str = "chunkwise",
    chunk_len: int = 16,
) -> tuple[Tensor, BlockState]:
    """Full Rodimus+ layer on [.., T, d]; residual wiring is internal.

    Default order: X_state = Rodimus(Norm(X)) + X, then the SW-SKA + FFN unit
    with X_state as the shared (two-hop) residual.
    """
    if p.rodimus_first:
        r, s_t = rodimus_block_forward(
            rmsnorm(x, p.rodimus.in_gain), p.rodimus, s0, exec_form, chunk_len
        )
        x_state = r + x
        y = _attn_ffn_unit(x_state, p, x_state)
        return y, s_t
    z = _attn_ffn_unit(x, p, x)
    r, s_t = rodimus_block_forward(rmsnorm(z, p.rodimus.in_gain), p.rodimus, s0, exec_form, chunk_len)
    return r + z, s_t


def gate_activations(x: Tensor, p: RodimusBlockParams, s0: BlockState | None = None) -> Activations:
    """DDTS gate activations for a (normalized) block input; diagnostics only."""
    if s0 is None:
        s0 = initial_state(p, x.shape[:-2])
    wide = matmul(x, p.w_up_v)
    xp = silu(causal_conv1d(wide, p.conv_kernel, p.conv_bias, init=s0.conv_tail))
    beta_src = x if p.beta_from == "raw" else xp
    return compute_gates(xp, beta_src, p.gates, p.gate_mode)


# -- streaming decode helpers -------------------------------------------------


def ska_decode_step(x_row: Tensor, p: AttentionParams, cache: KVWindowCache) -> Tensor:
    """One-token SKA step: push this position's K/V, attend over the window.

    ``x_row`` is [1, d] (already normalized); returns [1, d].  Equals the
    batched sliding-window attention at this position.
    """
    d = x_row.shape[-1]
    k_new = matmul(x_row, p.w_k)  # [1, d_h]
    x_h = reshape(x_row, (1, 1, d))
    v_new = matmul(x_h, p.w_v)  # [h, 1, d_h]
    cache.step(k_new[(0, slice(None))], reshape(v_new, (p.h, p.d_h)))
    keys = cache.keys()  # [w_used, d_h]
    values = cache.values()  # [h, w_used, d_h]
    q = matmul(x_h, p.w_q)  # [h, 1, d_h]
    logits = mul(matmul(q, swapaxes(reshape(keys, (1,) + keys.shape), -1, -2)), 1.0 / np.sqrt(p.d_h))
    weights = softmax_lastdim(logits)
    o = matmul(weights, values)  # [h, 1, d_h]
    o = reshape(swapaxes(o, 0, 1), (1, p.h * p.d_h))
    return matmul(o, p.w_o)


def rodimus_plus_decode_step(
    x_row: Tensor, p: RodimusPlusBlockParams, state: BlockState, exec_form: str = "scan"
) -> tuple[Tensor, BlockState]:
    """Single-token Rodimus+ step using the ring-buffer KV cache."""
    if state.window is None:
        state = BlockState(s=state.s, conv_tail=state.conv_tail, window=KVWindowCache(p.window))
    if not p.rodimus_first:
        raise ConfigError("streaming decode supports the default rodimus-first ordering only")
    x = reshape(x_row, (1, p.d))
    r, s_t = rodimus_block_forward(
        rmsnorm(x, p.rodimus.in_gain),
        p.rodimus,
        BlockState(s=state.s, conv_tail=state.conv_tail),
        exec_form="scan",
    )
    x_state = r + x
    attn_out = ska_decode_step(rmsnorm(x_state, p.attn_gain), p.attn, state.window)
    y_hat = attn_out + x_state
    ffn_res = x_state if p.two_hop else y_hat
    y = ffn_forward(rmsnorm(y_hat, p.ffn_gain), p.ffn) + ffn_res
    return y, BlockState(s=s_t.s, conv_tail=s_t.conv_tail, window=state.window)
