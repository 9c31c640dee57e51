"""Full model assembly: embedding, stacked blocks, final norm, LM head,
parameter accounting, stepwise decoding sessions, and memory reports."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .attention import AttentionParams, KVWindowCache, MaskSpec, attention_forward, cache_floats_per_token
from .blocks import (
    BlockState,
    FfnParams,
    RodimusBlockParams,
    RodimusPlusBlockParams,
    ffn_forward,
    initial_state,
    rodimus_block_forward,
    rodimus_plus_block_forward,
    rodimus_plus_decode_step,
    ska_decode_step,
)
from .errors import ConfigError, DataError
from .rng import Rng
from .tensor import (
    Tensor,
    embedding_lookup,
    gather_last,
    get_default_dtype,
    log_softmax_lastdim,
    matmul,
    mul,
    reshape,
    rmsnorm,
    softmax_lastdim,
    swapaxes,
    tsum,
)

ARCHS = (
    "rodimus",
    "rodimus_plus",
    "transformer_pp_baseline",
    "linear_attention_nogate_baseline",
)


@dataclass
class ModelConfig:
    arch: str = "rodimus"
    num_layers: int = 2
    d: int = 128
    n: int = 64  # state expansion factor (key/state width)
    low_rank: int = 16  # rank of the beta_hat bottleneck
    expansion: int = 2  # GLU widening, m = expansion * d
    conv_width: int = 4
    h: int = 4  # attention heads (rodimus_plus / transformer baseline)
    window: int = 32  # sliding-window size for SW-SKA
    vocab: int = 256
    tie_embeddings: bool = False
    exec_form: str = "chunkwise"
    chunk_len: int = 16
    seed: int = 0
    gate_mode: str = "full"
    beta_from: str = "raw"
    g_init: float = 1.0  # initial selection-gate level; alpha starts near exp(-g_init/2)
    two_hop: bool = True
    rodimus_first: bool = True

    def validate(self) -> None:
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.num_layers < 1:
            raise ConfigError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.d < 1 or self.vocab < 1:
            raise ConfigError("d and vocab must be positive")
        if self.low_rank >= self.expansion * self.d:
            raise ConfigError(
                f"low_rank {self.low_rank} must be < m = expansion*d = {self.expansion * self.d}"
            )
        if self.arch in ("rodimus_plus", "transformer_pp_baseline") and self.d % self.h != 0:
            raise ConfigError(f"head count {self.h} must divide d={self.d}")
        if self.exec_form not in ("scan", "parallel", "chunkwise"):
            raise ConfigError(f"unknown exec form {self.exec_form!r}")
        if self.chunk_len < 1:
            raise ConfigError(f"chunk_len must be >= 1, got {self.chunk_len}")
        if self.g_init <= 0:
            raise ConfigError(f"g_init must be > 0, got {self.g_init}")

    def effective_gate_mode(self) -> str:
        if self.arch == "linear_attention_nogate_baseline":
            return "none"
        return self.gate_mode

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


@dataclass
class TransformerBlockParams:
    """Pre-norm MHA + GLU FFN baseline layer (no positional encoding)."""

    attn_gain: Tensor
    attn: AttentionParams
    ffn_gain: Tensor
    ffn: FfnParams

    @staticmethod
    def init(d: int, h: int, rng: Rng, std: float = 0.02) -> "TransformerBlockParams":
        attn = AttentionParams.init("mha", d, h, d // h, rng, std=std)
        attn.w_o = Tensor(np.zeros((d, d)), requires_grad=True)
        return TransformerBlockParams(
            attn_gain=Tensor(np.ones(d), requires_grad=True),
            attn=attn,
            ffn_gain=Tensor(np.ones(d), requires_grad=True),
            ffn=FfnParams.init(d, rng, std),
        )

    def named(self, prefix: str):
        yield f"{prefix}.attn_gain", self.attn_gain, True
        yield from self.attn.named(f"{prefix}.attn")
        yield f"{prefix}.ffn_gain", self.ffn_gain, True
        yield from self.ffn.named(f"{prefix}.ffn")

    def count(self) -> int:
        return sum(t.size for _, t, _ in self.named("b"))


@dataclass
class ModelParams:
    cfg: ModelConfig
    embedding: Tensor  # [V, d]
    blocks: list = field(default_factory=list)
    final_gain: Tensor | None = None
    lm_head: Tensor | None = None  # [d, V]; None when tied

    def named(self):
        yield "embedding", self.embedding, False
        for i, b in enumerate(self.blocks):
            yield from b.named(f"blocks.{i}")
        yield "final_gain", self.final_gain, True
        if self.lm_head is not None:
            yield "lm_head", self.lm_head, False

    def parameters(self) -> list[Tensor]:
        return [t for _, t, _ in self.named()]

    def count(self) -> int:
        return sum(t.size for _, t, _ in self.named())


def build_model(cfg: ModelConfig, rng: Rng | None = None) -> ModelParams:
    """Deterministic initialization from cfg.seed (or an explicit Rng)."""
    cfg.validate()
    if rng is None:
        rng = Rng(cfg.seed, stream=1)
    gate_mode = cfg.effective_gate_mode()
    blocks = []
    for _ in range(cfg.num_layers):
        if cfg.arch in ("rodimus", "linear_attention_nogate_baseline"):
            blocks.append(
                RodimusBlockParams.init(
                    cfg.d,
                    cfg.n,
                    cfg.low_rank,
                    rng,
                    cfg.expansion,
                    cfg.conv_width,
                    cfg.beta_from,
                    gate_mode,
                    g_init=cfg.g_init,
                )
            )
        elif cfg.arch == "rodimus_plus":
            blocks.append(
                RodimusPlusBlockParams.init(
                    cfg.d,
                    cfg.n,
                    cfg.low_rank,
                    cfg.h,
                    cfg.window,
                    rng,
                    cfg.expansion,
                    cfg.conv_width,
                    cfg.beta_from,
                    gate_mode,
                    cfg.two_hop,
                    cfg.rodimus_first,
                    g_init=cfg.g_init,
                )
            )
        else:
            blocks.append(TransformerBlockParams.init(cfg.d, cfg.h, rng))
    embedding = Tensor(rng.trunc_normal((cfg.vocab, cfg.d), 0.02), requires_grad=True)
    lm_head = None
    if not cfg.tie_embeddings:
        lm_head = Tensor(rng.trunc_normal((cfg.d, cfg.vocab), 0.02), requires_grad=True)
    return ModelParams(
        cfg=cfg,
        embedding=embedding,
        blocks=blocks,
        final_gain=Tensor(np.ones(cfg.d), requires_grad=True),
        lm_head=lm_head,
    )


def _layer_forward(x: Tensor, block, cfg: ModelConfig, state: BlockState | None = None):
    if isinstance(block, RodimusBlockParams):
        y, s = rodimus_block_forward(
            rmsnorm(x, block.in_gain), block, state, cfg.exec_form, cfg.chunk_len
        )
        return x + y, s
    if isinstance(block, RodimusPlusBlockParams):
        return rodimus_plus_block_forward(x, block, state, cfg.exec_form, cfg.chunk_len)
    # transformer baseline
    mask = MaskSpec("causal")
    x = x + attention_forward(rmsnorm(x, block.attn_gain), block.attn, mask)
    x = x + ffn_forward(rmsnorm(x, block.ffn_gain), block.ffn)
    return x, None


def model_logits(tokens: np.ndarray, params: ModelParams) -> Tensor:
    """Logits [.., T, V] for integer token ids [.., T]."""
    cfg = params.cfg
    tokens = np.asarray(tokens)
    if tokens.min() < 0 or tokens.max() >= cfg.vocab:
        raise DataError(f"token id out of range [0, {cfg.vocab})")
    x = embedding_lookup(params.embedding, tokens)
    for block in params.blocks:
        x, _ = _layer_forward(x, block, cfg)
    x = rmsnorm(x, params.final_gain)
    head = params.lm_head if params.lm_head is not None else swapaxes(params.embedding, 0, 1)
    return matmul(x, head)


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood; optional 0/1 mask selects supervised positions."""
    ls = log_softmax_lastdim(logits)
    nll = -gather_last(ls, np.asarray(targets))
    if mask is None:
        return nll.mean()
    mask = np.asarray(mask, dtype=nll.data.dtype)
    total = float(mask.sum())
    if total == 0:
        raise DataError("loss mask selects no positions")
    return tsum(mul(nll, Tensor(mask))) * (1.0 / total)


def forward_train(
    tokens: np.ndarray, params: ModelParams, loss_mask: np.ndarray | None = None
) -> tuple[Tensor, Tensor]:
    """Next-token logits and mean cross-entropy over [B, T] token ids.

    ``loss_mask`` (if given) is [B, T-1] over target positions: entry (b, t)
    weights the prediction of tokens[b, t+1].
    """
    tokens = np.asarray(tokens)
    logits = model_logits(tokens, params)
    pred = logits[(Ellipsis, slice(0, tokens.shape[-1] - 1), slice(None))]
    targets = tokens[..., 1:]
    loss = cross_entropy(pred, targets, loss_mask)
    return logits, loss


# -- stepwise decoding --------------------------------------------------------


class InferenceSession:
    """Per-stream decoding state: one BlockState per layer plus a position counter.

    Memory is constant in generated length for the rodimus archs and
    constant-plus-window for rodimus_plus; the transformer baseline keeps the
    full history (its cache grows linearly).
    """

    def __init__(self, params: ModelParams):
        self.params = params
        cfg = params.cfg
        self.pos = 0
        self.states: list = []
        self.history: list[int] = []  # transformer baseline only
        for block in params.blocks:
            if isinstance(block, RodimusPlusBlockParams):
                st = initial_state(block.rodimus)
                st.window = KVWindowCache(block.window)
                self.states.append(st)
            elif isinstance(block, RodimusBlockParams):
                self.states.append(initial_state(block))
            else:
                self.states.append(None)

    def state_float_count(self) -> int:
        return sum(s.float_count() for s in self.states if s is not None)

    def decode_step(self, token: int) -> np.ndarray:
        """Feed one token, return the next-token logits [V]."""
        cfg = self.params.cfg
        if not 0 <= token < cfg.vocab:
            raise DataError(f"token id {token} out of range [0, {cfg.vocab})")
        if cfg.arch == "transformer_pp_baseline":
            # the baseline has no compressed state; rerun over the history
            self.history.append(token)
            logits = model_logits(np.asarray(self.history), self.params)
            self.pos += 1
            return logits.data[-1]
        x = embedding_lookup(self.params.embedding, np.asarray([token]))  # [1, d]
        for i, block in enumerate(self.params.blocks):
            if isinstance(block, RodimusPlusBlockParams):
                x, self.states[i] = rodimus_plus_decode_step(x, block, self.states[i])
            else:
                y, self.states[i] = rodimus_block_forward(
                    rmsnorm(x, block.in_gain), block, self.states[i], exec_form="scan"
                )
                x = x + y
        x = rmsnorm(x, self.params.final_gain)
        head = (
            self.params.lm_head
            if self.params.lm_head is not None
            else swapaxes(self.params.embedding, 0, 1)
        )
        logits = matmul(x, head)
        self.pos += 1
        return logits.data[0]


def generate(
    params: ModelParams, prompt: list[int], steps: int, rng: Rng, temperature: float = 1.0
) -> list[int]:
    """Sampled decode: feed the prompt, then draw ``steps`` tokens."""
    session = InferenceSession(params)
    logits = None
    for tok in prompt:
        logits = session.decode_step(int(tok))
    out = list(prompt)
    for _ in range(steps):
        if temperature <= 0:
            nxt = int(np.argmax(logits))
        else:
            probs = softmax_lastdim(Tensor(logits / temperature)).data
            u = float(rng.uniform(()))
            nxt = min(int(np.searchsorted(np.cumsum(probs), u)), len(probs) - 1)
        out.append(nxt)
        logits = session.decode_step(nxt)
    return out


# -- accounting ---------------------------------------------------------------


def memory_report(cfg: ModelConfig, context_len: int) -> dict:
    """Closed-form per-stream cache/state sizes, in floats and bytes."""
    cfg.validate()
    m = cfg.expansion * cfg.d
    d_h = cfg.d // cfg.h
    itemsize = get_default_dtype().itemsize
    per_layer = {"recurrent_state": 0, "conv_tail": 0, "window_kv": 0, "full_kv": 0}
    if cfg.arch in ("rodimus", "linear_attention_nogate_baseline", "rodimus_plus"):
        per_layer["recurrent_state"] = cfg.n * m
        per_layer["conv_tail"] = (cfg.conv_width - 1) * m
    if cfg.arch == "rodimus_plus":
        per_layer["window_kv"] = cfg.window * cache_floats_per_token("ska", cfg.h, d_h)
    if cfg.arch == "transformer_pp_baseline":
        per_layer["full_kv"] = context_len * cache_floats_per_token("mha", cfg.h, d_h)
    total = cfg.num_layers * sum(per_layer.values())
    return {
        "arch": cfg.arch,
        "context_len": context_len,
        "per_layer_floats": per_layer,
        "total_floats": total,
        "total_bytes": total * itemsize,
        "grows_with_context": cfg.arch == "transformer_pp_baseline",
    }
