"""Softmax attention variants: MHA, GQA (MQA as g_kv=1), and Shared-Key
Attention (SKA), with causal and sliding-window masks and a ring-buffer KV
cache for streaming decode.

SKA keeps one key projection for all heads while values stay per-head.  Any
MHA logit pattern can be reproduced exactly by re-basing the per-head query
weights against an invertible shared key weight
(``ska_equivalence_construct``), so the compression is lossless in terms of
attainable attention maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, ShapeError
from .rng import Rng
from .tensor import Tensor, matmul, mul, reshape, softmax_lastdim, swapaxes

MASK_KINDS = ("causal", "sliding_window")


@dataclass(frozen=True)
class MaskSpec:
    """Causal visibility pattern: full lower-triangular or a sliding window.

    causal:          (t, i) visible iff i <= t
    sliding_window:  (t, i) visible iff t - window < i <= t
    """

    kind: str = "causal"
    window: int | None = None

    def __post_init__(self):
        if self.kind not in MASK_KINDS:
            raise ConfigError(f"mask kind must be one of {MASK_KINDS}, got {self.kind!r}")
        if self.kind == "sliding_window" and (self.window is None or self.window < 1):
            raise ConfigError("sliding_window mask needs a positive window")

    def additive(self, T: int, dtype=np.float64) -> np.ndarray:
        """[T, T] matrix of 0 (visible) / -inf (masked)."""
        t = np.arange(T)[:, None]
        i = np.arange(T)[None, :]
        visible = i <= t
        if self.kind == "sliding_window":
            visible &= i > t - self.window
        out = np.where(visible, 0.0, -np.inf).astype(dtype)
        return out


def attend(q: Tensor, k: Tensor, v: Tensor, mask: MaskSpec) -> Tensor:
    """Masked softmax attention on per-head tensors [.., T, d_h].

    Logits are scaled by 1/sqrt(d_h) before masking; masked logits are -inf
    pre-softmax so their weights are exactly zero.
    """
    d_h = q.shape[-1]
    T = q.shape[-2]
    logits = mul(matmul(q, swapaxes(k, -1, -2)), 1.0 / np.sqrt(d_h))
    weights = softmax_lastdim(logits, mask=mask.additive(T, logits.data.dtype))
    return matmul(weights, v)


@dataclass
class AttentionParams:
    """Projection weights for one attention layer.

    ``mode`` selects the key/value sharing scheme:
      mha: per-head keys and values
      gqa: one key/value head per group of ``g_kv`` (g_kv=1 is MQA)
      ska: one shared key for all heads, values per-head
    """

    mode: str
    h: int
    d_h: int
    w_q: Tensor  # [h, d, d_h]
    w_k: Tensor  # mha [h, d, d_h]; gqa [g_kv, d, d_h]; ska [d, d_h]
    w_v: Tensor  # mha/ska [h, d, d_h]; gqa [g_kv, d, d_h]
    w_o: Tensor  # [h * d_h, d]
    g_kv: int = 0

    @staticmethod
    def init(mode: str, d: int, h: int, d_h: int, rng: Rng, g_kv: int = 0, std: float = 0.02) -> "AttentionParams":
        if mode not in ("mha", "gqa", "ska"):
            raise ConfigError(f"unknown attention mode {mode!r}")
        if mode == "gqa":
            if g_kv < 1 or h % g_kv != 0:
                raise ConfigError(f"g_kv={g_kv} must divide head count h={h}")
            kv_heads = g_kv
            k_shape = (kv_heads, d, d_h)
            v_shape = (kv_heads, d, d_h)
        elif mode == "ska":
            k_shape = (d, d_h)
            v_shape = (h, d, d_h)
        else:
            k_shape = (h, d, d_h)
            v_shape = (h, d, d_h)
        return AttentionParams(
            mode=mode,
            h=h,
            d_h=d_h,
            g_kv=g_kv,
            w_q=Tensor(rng.trunc_normal((h, d, d_h), std), requires_grad=True),
            w_k=Tensor(rng.trunc_normal(k_shape, std), requires_grad=True),
            w_v=Tensor(rng.trunc_normal(v_shape, std), requires_grad=True),
            w_o=Tensor(rng.trunc_normal((h * d_h, d), std), requires_grad=True),
        )

    def named(self, prefix: str):
        yield f"{prefix}.w_q", self.w_q, False
        yield f"{prefix}.w_k", self.w_k, False
        yield f"{prefix}.w_v", self.w_v, False
        yield f"{prefix}.w_o", self.w_o, False

    def count(self) -> int:
        return self.w_q.size + self.w_k.size + self.w_v.size + self.w_o.size


def _per_head_kv(x_heads: Tensor, p: AttentionParams) -> tuple[Tensor, Tensor]:
    """Project keys/values and broadcast them to one tensor per query head."""
    if p.mode == "mha":
        k = matmul(x_heads, p.w_k)
        v = matmul(x_heads, p.w_v)
    elif p.mode == "ska":
        k = matmul(x_heads, reshape(p.w_k, (1,) + p.w_k.shape))  # [.., 1, T, d_h]
        kidx = np.zeros(p.h, dtype=np.intp)
        k = k[(Ellipsis, kidx, slice(None), slice(None))]
        v = matmul(x_heads, p.w_v)
    else:  # gqa
        group = np.repeat(np.arange(p.g_kv, dtype=np.intp), p.h // p.g_kv)
        k = matmul(x_heads, p.w_k)[(Ellipsis, group, slice(None), slice(None))]
        v = matmul(x_heads, p.w_v)[(Ellipsis, group, slice(None), slice(None))]
    return k, v


def attention_forward(x: Tensor, p: AttentionParams, mask: MaskSpec) -> Tensor:
    """Full attention layer on [.., T, d]: project, attend per head, merge, output."""
    T, d = x.shape[-2], x.shape[-1]
    lead = x.shape[:-2]
    x_heads = reshape(x, lead + (1, T, d))
    q = matmul(x_heads, p.w_q)  # [.., h, T, d_h]
    k, v = _per_head_kv(x_heads, p)
    o = attend(q, k, v, mask)  # [.., h, T, d_h]
    o = reshape(swapaxes(o, -3, -2), lead + (T, p.h * p.d_h))
    return matmul(o, p.w_o)


def ska_forward(x: Tensor, p: AttentionParams, mask: MaskSpec) -> Tensor:
    if p.mode != "ska":
        raise ConfigError("ska_forward requires params in ska mode")
    return attention_forward(x, p, mask)


def ska_equivalence_construct(
    w_q_h: np.ndarray,
    w_k_h: np.ndarray,
    wk_tilde: np.ndarray,
    cond_bound: float = 1e6,
    allow_pinv: bool = True,
) -> np.ndarray:
    """Per-head query weight that makes shared-key logits equal MHA logits.

    Returns W_q_h @ W_k_h^T @ inv(wk_tilde)^T.  ``wk_tilde`` must be square;
    above ``cond_bound`` (or when singular) a pseudo-inverse is used if
    permitted, otherwise an error is raised.  With the result, the logits
    (X W~_q)(X wk_tilde)^T match (X W_q)(X W_k)^T for every X.
    """
    wk_tilde = np.asarray(wk_tilde, dtype=np.float64)
    if wk_tilde.ndim != 2 or wk_tilde.shape[0] != wk_tilde.shape[1]:
        if not allow_pinv:
            raise DomainError(f"shared key weight must be square, got {wk_tilde.shape}")
        inv_t = np.linalg.pinv(wk_tilde).T
    else:
        cond = np.linalg.cond(wk_tilde)
        if cond > cond_bound or not np.isfinite(cond):
            if not allow_pinv:
                raise DomainError(f"shared key weight condition number {cond:.3g} exceeds {cond_bound:.3g}")
            inv_t = np.linalg.pinv(wk_tilde).T
        else:
            inv_t = np.linalg.inv(wk_tilde).T
    return np.asarray(w_q_h) @ np.asarray(w_k_h).T @ inv_t


class KVWindowCache:
    """Ring buffer of the last ``window`` (key, value) rows.

    Single-writer; eviction is strictly oldest-first.  Attention over the
    cache equals attention over the full history under a sliding-window mask.
    """

    def __init__(self, window: int):
        if window < 1:
            raise ConfigError(f"window must be >= 1, got {window}")
        self.window = window
        self._k: list[Tensor] = []
        self._v: list[Tensor] = []

    def __len__(self) -> int:
        return len(self._k)

    def step(self, k_new: Tensor, v_new: Tensor) -> None:
        self._k.append(k_new)
        self._v.append(v_new)
        if len(self._k) > self.window:
            self._k.pop(0)
            self._v.pop(0)

    def keys(self) -> Tensor:
        from .tensor import stack

        return stack(self._k, axis=-2)

    def values(self) -> Tensor:
        from .tensor import stack

        return stack(self._v, axis=-2)

    def float_count(self) -> int:
        return sum(int(k.size) + int(v.size) for k, v in zip(self._k, self._v))


def cache_floats_per_token(mode: str, h: int, d_h: int, g_kv: int = 0) -> int:
    """Closed-form KV cache cost per cached position, in floats."""
    if mode == "mha":
        return 2 * h * d_h
    if mode == "gqa":
        if g_kv < 1:
            raise ConfigError("gqa cache size needs g_kv >= 1")
        return 2 * g_kv * d_h
    if mode == "ska":
        return d_h + h * d_h
    raise ConfigError(f"unknown attention mode {mode!r}")
