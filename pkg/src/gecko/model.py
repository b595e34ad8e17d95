"""Gecko block, toy causal LM and bounded-state streaming.

Block layout (pre-norm)::

    xn  = TSDN(x)
    x'  = CEMA(xn)
    Q, K, V, Z' from (x', xn); rotary on Q, K with global positions
    O   = SCA(Q, K, V) + AWM(Q_m, K_m, V)
    x   = x + (silu(xn W_g + b_g) * O) W_o + b_o
    x   = x + SwiGLU(TSDN(x))

Streaming processes whole chunks and carries a fixed-size ``StreamState``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import torch
import torch.nn.functional as F
from torch import nn

from . import attention as attn
from .cema import Cema
from .memory import MemoryProjection, MemoryState, awm_chunks
from .norm import NormConfig, NormState, TimestepNorm
from .numerics import NonFiniteError, generator, matmul

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class ModelConfig:
    layers: int = 2
    dim: int = 128
    zdim: int = 128
    vdim: int = 256
    cema_h: int = 8
    chunk: int = 64
    norm_groups: int = 4
    beta1: float = 0.999
    beta2: float = 0.9999
    norm_eps: float = 1e-5
    vocab: int = 256
    seed: int = 0
    dtype: str = "float32"
    # ablation switches
    attention: str = "sca"  # chunk | swa | sca
    window: int = 0  # swa window, 0 means chunk size
    awm: bool = True
    awm_delta: bool = True
    cema: bool = True
    cema_chunk: int = 32
    norm_variant: str = "tsdn"  # tsdn | tsn
    norm_literal: bool = False
    gate: str = "silu"  # silu | none
    tie_embeddings: bool = False
    rope_base: float = 10000.0
    # what a document reset clears
    reset_cema: bool = True
    reset_attention: bool = False
    reset_norm: bool = False

    def __post_init__(self):
        if self.chunk < 1:
            raise ValueError("chunk must be >= 1")
        if self.dim % self.norm_groups:
            raise ValueError("dim must be divisible by norm_groups")
        if self.zdim % 2:
            raise ValueError("zdim must be even for rotary embeddings")
        if self.attention not in ("chunk", "swa", "sca"):
            raise ValueError(f"unknown attention pattern {self.attention!r}")
        if self.dtype not in DTYPES:
            raise ValueError(f"unknown dtype {self.dtype!r}")
        if self.attention == "swa" and self.swa_window > self.chunk:
            raise ValueError("swa window may not exceed the chunk size")

    @property
    def torch_dtype(self):
        return DTYPES[self.dtype]

    @property
    def swa_window(self):
        return self.window or self.chunk

    @property
    def ffn_hidden(self):
        return 8 * round(8 * self.dim / 3 / 8)

    @property
    def attention_context(self):
        return 2 * self.chunk if self.attention == "sca" else self.chunk

    def norm_config(self):
        return NormConfig(self.norm_groups, self.beta1, self.beta2, self.norm_eps,
                          self.norm_variant, self.norm_literal)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


def parameter_count(cfg: ModelConfig) -> int:
    d, z, v, h, f = cfg.dim, cfg.zdim, cfg.vdim, cfg.cema_h, cfg.ffn_hidden
    block = 4 * d  # two norms
    block += d * (5 * h + 1) if cfg.cema else 0
    block += d * z + z + 4 * z + d * v + v  # shared projection, q/k scalars, values
    block += 4 * z if cfg.awm else 0
    block += d * v + v if cfg.gate == "silu" else 0
    block += v * d + d  # output projection
    block += 3 * d * f  # SwiGLU
    total = cfg.layers * block + cfg.vocab * d + 2 * d
    total += 0 if cfg.tie_embeddings else d * cfg.vocab
    return total


# ------------------------------------------------------------------ state


@dataclass
class LayerState:
    cema: torch.Tensor | None
    norm1: NormState
    norm2: NormState
    kv: attn.KvCache
    mem: MemoryState
    prev: tuple | None  # pending (K_m, V) chunk not yet absorbed by memory

    def tensors(self):
        out = {"norm1": self.norm1.to_dict(), "norm2": self.norm2.to_dict(),
               "kv": {"k": self.kv.k, "v": self.kv.v, "seg": self.kv.seg},
               "mem": {"M": self.mem.M, "zt": self.mem.zt, "r": self.mem.r}}
        if self.cema is not None:
            out["cema"] = {"h": self.cema}
        if self.prev is not None:
            out["prev"] = {"k": self.prev[0], "v": self.prev[1]}
        return out


@dataclass
class StreamState:
    layers: list
    final_norm: NormState
    position: int = 0
    seg: torch.Tensor | None = None  # (B,) current document id
    pending: torch.Tensor | None = None  # (B, vocab) log-probs for the next token

    def nbytes(self) -> int:
        total = 0

        def walk(obj):
            nonlocal total
            if isinstance(obj, torch.Tensor):
                total += obj.numel() * obj.element_size()
            elif isinstance(obj, dict):
                for o in obj.values():
                    walk(o)

        for layer in self.layers:
            walk(layer.tensors())
        walk(self.final_norm.to_dict())
        walk({"seg": self.seg, "pending": self.pending})
        return total


# ------------------------------------------------------------------ layers


class SwiGLU(nn.Module):
    def __init__(self, d, hidden, generator=None, dtype=torch.float32):
        super().__init__()
        kw = dict(generator=generator, dtype=dtype)
        self.w1 = nn.Parameter(torch.randn(d, hidden, **kw) / math.sqrt(d))
        self.w3 = nn.Parameter(torch.randn(d, hidden, **kw) / math.sqrt(d))
        self.w2 = nn.Parameter(torch.randn(hidden, d, **kw) / math.sqrt(hidden) * 0.5)

    def forward(self, x):
        return matmul(F.silu(matmul(x, self.w1)) * matmul(x, self.w3), self.w2)


class GeckoBlock(nn.Module):
    def __init__(self, cfg: ModelConfig, g: torch.Generator):
        super().__init__()
        self.cfg = cfg
        d, z, v, dt = cfg.dim, cfg.zdim, cfg.vdim, cfg.torch_dtype
        self.norm1 = TimestepNorm(d, cfg.norm_config(), dt)
        self.cema = Cema(d, cfg.cema_h, cfg.cema_chunk, g, dt) if cfg.cema else None
        self.proj = attn.GatedProjection(d, z, v, g, dt)
        self.mem = MemoryProjection(z, g, dt) if cfg.awm else None
        if cfg.gate == "silu":
            self.w_g = nn.Parameter(torch.randn(d, v, generator=g, dtype=dt) / math.sqrt(d))
            self.b_g = nn.Parameter(torch.zeros(v, dtype=dt))
        self.w_o = nn.Parameter(torch.randn(v, d, generator=g, dtype=dt) / math.sqrt(v) * 0.5)
        self.b_o = nn.Parameter(torch.zeros(d, dtype=dt))
        self.norm2 = TimestepNorm(d, cfg.norm_config(), dt)
        self.ffn = SwiGLU(d, cfg.ffn_hidden, g, dt)

    def initial_state(self, batch) -> LayerState:
        cfg, dt = self.cfg, self.cfg.torch_dtype
        cd = torch.complex128 if dt == torch.float64 else torch.complex64
        k = cfg.norm_groups
        return LayerState(
            torch.zeros(batch, cfg.dim, cfg.cema_h, dtype=cd) if cfg.cema else None,
            NormState.zeros(batch, k, dt),
            NormState.zeros(batch, k, dt),
            attn.KvCache(),
            MemoryState.zeros(batch, cfg.zdim, cfg.vdim, dt),
            None,
        )

    def forward(self, x, state: LayerState | None = None, position: int = 0, resets=None, seg=None):
        """Returns ``(y, state')``. ``resets`` (B, n) bool marks document starts."""
        cfg = self.cfg
        B, n, _ = x.shape
        if state is None:
            state = self.initial_state(B)
        keep = None if resets is None else (~resets).to(x.dtype)
        xn, n1 = self.norm1(x, state.norm1, keep if cfg.reset_norm else None)
        if self.cema is not None:
            xc, h = self.cema(xn, keep if cfg.reset_cema else None, state.cema)
        else:
            xc, h = xn, None
        q, k, v, zn = self.proj(xc, xn)
        pos = torch.arange(position, position + n)
        q = attn.apply_rope(q, pos, cfg.rope_base)
        k = attn.apply_rope(k, pos, cfg.rope_base)
        seg = seg if cfg.reset_attention else None
        o, kv = self._attend(q, k, v, state.kv, seg)
        mem, prev = state.mem, state.prev
        if self.mem is not None:
            qm, km = self.mem(zn)
            om, mem, prev = awm_chunks(qm, km, v, cfg.chunk, mem, prev, cfg.awm_delta)
            o = o + om
        if cfg.gate == "silu":
            o = F.silu(matmul(xn, self.w_g) + self.b_g) * o
        x = x + matmul(o, self.w_o) + self.b_o
        xn2, n2 = self.norm2(x, state.norm2, keep if cfg.reset_norm else None)
        x = x + self.ffn(xn2)
        return x, LayerState(h, n1, n2, kv, mem, prev)

    def _attend(self, q, k, v, cache, seg):
        cfg = self.cfg
        c = cfg.chunk
        if cfg.attention == "sca":
            return attn.attend_sliding_chunk(q, k, v, c, cache, seg)
        if cfg.attention == "chunk":
            if seg is not None:
                raise NotImplementedError("document resets with chunk-wise attention")
            return attn.attend_chunkwise(q, k, v, c), attn.KvCache(k[:, -c:], v[:, -c:])
        # sliding window: prepend the cached chunk and drop its outputs
        if seg is not None:
            raise NotImplementedError("document resets with sliding-window attention")
        if cache.empty:
            o = attn.attend_sliding_window_blocked(q, k, v, cfg.swa_window, c)
        else:
            kk, vv = torch.cat([cache.k, k], 1), torch.cat([cache.v, v], 1)
            qq = torch.cat([torch.zeros_like(cache.k), q], 1)
            o = attn.attend_sliding_window_blocked(qq, kk, vv, cfg.swa_window, c)[:, c:]
        return o, attn.KvCache(k[:, -c:], v[:, -c:])


class GeckoLM(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        g = generator(cfg.seed)
        dt = cfg.torch_dtype
        self.embed = nn.Parameter(torch.randn(cfg.vocab, cfg.dim, generator=g, dtype=dt))
        self.blocks = nn.ModuleList([GeckoBlock(cfg, g) for _ in range(cfg.layers)])
        self.final_norm = TimestepNorm(cfg.dim, cfg.norm_config(), dt)
        if not cfg.tie_embeddings:
            # small logits at init so the first loss is close to ln(vocab)
            self.head = nn.Parameter(torch.randn(cfg.dim, cfg.vocab, generator=g, dtype=dt) * 0.01)

    def initial_state(self, batch) -> StreamState:
        dt = self.cfg.torch_dtype
        return StreamState(
            [b.initial_state(batch) for b in self.blocks],
            NormState.zeros(batch, self.cfg.norm_groups, dt),
            0,
            torch.zeros(batch, dtype=torch.long),
            torch.zeros(batch, self.cfg.vocab, dtype=dt),
        )

    def _head(self):
        return self.embed.t() if self.cfg.tie_embeddings else self.head

    def forward(self, tokens, state: StreamState | None = None, resets=None):
        """Logits for ``tokens`` (B, n); returns ``(logits, state')``."""
        cfg = self.cfg
        if tokens.numel() and int(tokens.max()) >= cfg.vocab:
            raise ValueError(f"token id {int(tokens.max())} outside vocabulary of {cfg.vocab}")
        B, n = tokens.shape
        if state is None:
            state = self.initial_state(B)
        seg = None
        if resets is not None:
            seg = state.seg[:, None] + torch.cumsum(resets.long(), 1)
        elif cfg.reset_attention and state.seg is not None and n:
            # keep document ids flowing so a later chunk with resets sees the cache's ids
            seg = state.seg[:, None].expand(B, n)
        x = self.embed[tokens]
        new_layers = []
        for block, ls in zip(self.blocks, state.layers):
            x, ls = block(x, ls, state.position, resets, seg)
            new_layers.append(ls)
        keep = None
        if resets is not None and cfg.reset_norm:
            keep = (~resets).to(x.dtype)
        x, fn = self.final_norm(x, state.final_norm, keep)
        logits = matmul(x, self._head())
        new_seg = seg[:, -1] if seg is not None else state.seg
        pending = torch.log_softmax(logits[:, -1], -1) if n else state.pending
        return logits, StreamState(new_layers, fn, state.position + n, new_seg, pending)


def lm_loss(model: GeckoLM, tokens, resets=None):
    """Mean next-token NLL in nats over ``tokens`` (B, n)."""
    logits, _ = model(tokens[:, :-1], resets=None if resets is None else resets[:, :-1])
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), tokens[:, 1:].reshape(-1))


def token_nll(model: GeckoLM, tokens, resets=None):
    """Per-position NLL (B, n-1) of ``tokens[:, 1:]`` given their prefixes."""
    logits, _ = model(tokens[:, :-1], resets=None if resets is None else resets[:, :-1])
    logp = torch.log_softmax(logits, -1)
    return -logp.gather(-1, tokens[:, 1:, None])[..., 0]


def stream_score(model: GeckoLM, state: StreamState, chunk, resets=None):
    """Score one chunk given everything streamed before it.

    Returns ``(nll, state')`` where ``nll[:, i]`` is the NLL of ``chunk[:, i]``;
    the very first token of a stream has no prediction and scores NaN.
    """
    c = model.cfg.chunk
    if chunk.shape[1] != c:
        raise ValueError(f"stream chunks must hold exactly {c} tokens")
    if state.position % c:
        raise ValueError("stream state is not at a chunk boundary")
    first = -state.pending.gather(-1, chunk[:, :1])
    if state.position == 0:
        first = torch.full_like(first, float("nan"))
    logits, new = model(chunk, state, resets)
    logp = torch.log_softmax(logits[:, :-1], -1)
    rest = -logp.gather(-1, chunk[:, 1:, None])[..., 0]
    return torch.cat([first, rest], dim=1), new


@torch.no_grad()
def stream_generate(model: GeckoLM, prompt, steps: int, temperature: float = 1.0, seed: int = 0):
    """Sample ``steps`` tokens after ``prompt`` (B, n) with chunked state.

    Full chunks are committed to the stream state; the open partial chunk
    is recomputed from the last committed state for every new token.
    """
    c = model.cfg.chunk
    g = generator(seed)
    B = prompt.shape[0]
    state = model.initial_state(B)
    buf = prompt
    out = []
    while buf.shape[1] >= c:
        _, state = model(buf[:, :c], state)
        buf = buf[:, c:]
    for _ in range(steps):
        if buf.shape[1]:
            logits, _ = model(buf, state)
            logp = torch.log_softmax(logits[:, -1], -1)
        else:
            logp = state.pending
        if temperature == 0:
            nxt = logp.argmax(-1, keepdim=True)
        else:
            nxt = torch.multinomial(torch.softmax(logp / temperature, -1), 1, generator=g)
        out.append(nxt)
        buf = torch.cat([buf, nxt], 1)
        if buf.shape[1] == c:
            _, state = model(buf, state)
            buf = buf[:, :0]
    return torch.cat(out, 1) if out else prompt[:, :0]


def check_finite(loss, step):
    if not torch.isfinite(loss):
        raise NonFiniteError(f"non-finite loss {loss.item()} at step {step}")
