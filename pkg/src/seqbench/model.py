"""Transformer encoder-decoder with independent encoder/decoder depths.

One parameter set serves three decoder pass types:
  * causal full pass (teacher forcing / full-prefix recomputation)
  * causal incremental pass with cached keys/values (one step per call)
  * bidirectional pass (masked-token input, no causal mask), plus a
    dual-context variant where each position attends to token content only
    at an allowed per-position subset and to MASK embeddings elsewhere

Forward code is written against the polymorphic autodiff ops, so the same
functions run plain numpy for inference and record the tape for training.

Blocks are pre-norm; positions are learned embeddings by default with a
sinusoidal option; output projection is tied to the token embedding unless
weight_tying is off.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .counting import OpCounter, scoped
from .kernels import (
    AttentionParams,
    merge_heads,
    multi_head_attention,
    scaled_dot_attention,
    split_heads,
)
from .tasks import MASK_ID, PAD_ID

CHECKPOINT_MAGIC = b"SEQBENCHCKPT1\n"


@dataclass(frozen=True)
class ModelConfig:
    E: int
    D: int
    d_model: int = 256
    d_ffn: int = 1024
    heads: int = 8
    vocab_size: int = 68
    max_len: int = 64
    decoder_mode: str = "causal"          # causal = AR, bidirectional = CMLM/DisCo
    decoder_ffn_enabled: bool = True
    dropout: float = 0.1
    weight_tying: bool = True
    positions: str = "learned"            # or "sinusoidal"
    dtype: str = "float64"                # float32 for benchmarks/large trainings

    def __post_init__(self):
        if self.E < 1 or self.D < 1:
            raise ValueError(f"E and D must be >= 1, got {self.E}-{self.D}")
        if self.d_model % self.heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.decoder_mode not in ("causal", "bidirectional"):
            raise ValueError(f"unknown decoder_mode {self.decoder_mode!r}")
        if self.positions not in ("learned", "sinusoidal"):
            raise ValueError(f"unknown positions {self.positions!r}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"unknown dtype {self.dtype!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout {self.dropout} outside [0, 1)")
        if self.vocab_size < 8:
            raise ValueError("vocab_size < 8")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


def sinusoid_table(n_pos: int, d: int, dtype=np.float64) -> np.ndarray:
    pos = np.arange(n_pos)[:, None]
    idx = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (idx // 2)) / d)
    table = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(dtype)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 777)))
    dt = cfg.np_dtype
    d, f = cfg.d_model, cfg.d_ffn
    p: dict[str, np.ndarray] = {}

    def emb(shape):
        return rng.normal(0.0, d ** -0.5, size=shape).astype(dt)

    def lin(fan_in, fan_out):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dt)

    def attn(prefix):
        for name in ("wq", "wk", "wv", "wo"):
            p[f"{prefix}.{name}"] = lin(d, d)
        for name in ("bq", "bv", "bo"):
            p[f"{prefix}.{name}"] = np.zeros(d, dtype=dt)

    def norm(prefix):
        p[f"{prefix}.gain"] = np.ones(d, dtype=dt)
        p[f"{prefix}.bias"] = np.zeros(d, dtype=dt)

    def ffn(prefix):
        p[f"{prefix}.w1"] = lin(d, f)
        p[f"{prefix}.b1"] = np.zeros(f, dtype=dt)
        p[f"{prefix}.w2"] = lin(f, d)
        p[f"{prefix}.b2"] = np.zeros(d, dtype=dt)

    if cfg.weight_tying:
        p["embed.token"] = emb((cfg.vocab_size, d))
    else:
        p["enc_embed.token"] = emb((cfg.vocab_size, d))
        p["dec_embed.token"] = emb((cfg.vocab_size, d))
        p["out_proj.w"] = lin(d, cfg.vocab_size)
    if cfg.positions == "learned":
        p["enc.pos"] = emb((cfg.max_len, d))
        p["dec.pos"] = emb((cfg.max_len + 1, d))

    for i in range(cfg.E):
        attn(f"enc.{i}.self")
        norm(f"enc.{i}.norm1")
        ffn(f"enc.{i}.ffn")
        norm(f"enc.{i}.norm2")
    norm("enc.norm")

    for i in range(cfg.D):
        attn(f"dec.{i}.self")
        norm(f"dec.{i}.norm1")
        attn(f"dec.{i}.cross")
        norm(f"dec.{i}.norm2")
        if cfg.decoder_ffn_enabled:
            ffn(f"dec.{i}.ffn")
            norm(f"dec.{i}.norm3")
    norm("dec.norm")

    if cfg.decoder_mode == "bidirectional":
        p["len_head.w"] = lin(d, cfg.max_len)
        p["len_head.b"] = np.zeros(cfg.max_len, dtype=dt)
    return p


def param_count(params: dict, prefix: str = "") -> int:
    return sum(
        ad.value_of(v).size for k, v in params.items()
        if k.startswith(prefix)
    )


def _attn_params(params: dict, prefix: str) -> AttentionParams:
    g = params.__getitem__
    return AttentionParams(
        wq=g(f"{prefix}.wq"), bq=g(f"{prefix}.bq"),
        wk=g(f"{prefix}.wk"),
        wv=g(f"{prefix}.wv"), bv=g(f"{prefix}.bv"),
        wo=g(f"{prefix}.wo"), bo=g(f"{prefix}.bo"),
    )


def _token_table(cfg: ModelConfig, params: dict, side: str):
    if cfg.weight_tying:
        return params["embed.token"]
    return params[f"{side}_embed.token"]


def _pos_slice(cfg: ModelConfig, params: dict, side: str, n: int):
    """Position rows 0..n-1, kept differentiable for learned tables."""
    if cfg.positions == "learned":
        table = params[f"{side}.pos"]
        ids = np.arange(n)
        return ad.embedding_lookup(table, ids)
    return sinusoid_table(n, cfg.d_model, cfg.np_dtype)


# ---------------------------------------------------------------------------
# shared forward pieces
# ---------------------------------------------------------------------------

def _embed_tokens(cfg, params, ids, side: str, dropout_rng):
    table = _token_table(cfg, params, side)
    x = ad.mul(ad.embedding_lookup(table, ids), math.sqrt(cfg.d_model))
    x = ad.add(x, _pos_slice(cfg, params, "enc" if side == "enc" else "dec", ids.shape[1]))
    return ad.dropout(x, cfg.dropout, dropout_rng)


def _norm(params, prefix, x, counter):
    return ad.layer_norm(x, params[f"{prefix}.gain"], params[f"{prefix}.bias"],
                         counter=counter)


def _ffn_block(cfg, params, prefix, x, counter, dropout_rng):
    with scoped(counter, "ffn"):
        h = ad.relu(ad.add(ad.matmul(x, params[f"{prefix}.w1"], counter),
                           params[f"{prefix}.b1"]), counter=counter)
        h = ad.add(ad.matmul(h, params[f"{prefix}.w2"], counter), params[f"{prefix}.b2"])
    return ad.dropout(h, cfg.dropout, dropout_rng)


@dataclass
class EncoderOut:
    states: object                 # [B, Ls, d] ndarray or Var
    src_mask: np.ndarray           # [B, Ls] bool, True = real token


def _check_tokens(cfg: ModelConfig, ids: np.ndarray, what: str) -> None:
    if ids.ndim != 2:
        raise ValueError(f"{what}: expected [batch, length] ids, got shape {ids.shape}")
    if ids.shape[1] > cfg.max_len:
        raise ValueError(f"{what}: length {ids.shape[1]} exceeds max_len {cfg.max_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ValueError(f"{what}: token id outside vocab of {cfg.vocab_size}")


def encode(cfg: ModelConfig, params: dict, src_tokens: np.ndarray,
           counter: OpCounter | None = None,
           dropout_rng: np.random.Generator | None = None) -> EncoderOut:
    """Run the E-layer encoder over a right-padded batch of token ids."""
    src_tokens = np.asarray(src_tokens)
    _check_tokens(cfg, src_tokens, "encode")
    src_mask = src_tokens != PAD_ID
    attn_mask = src_mask[:, None, None, :]
    with scoped(counter, "encoder"):
        x = _embed_tokens(cfg, params, src_tokens, "enc", dropout_rng)
        for i in range(cfg.E):
            xn = _norm(params, f"enc.{i}.norm1", x, counter)
            a = multi_head_attention(xn, xn, xn, cfg.heads,
                                     _attn_params(params, f"enc.{i}.self"),
                                     mask=attn_mask, counter=counter)
            x = ad.add(x, ad.dropout(a, cfg.dropout, dropout_rng))
            xn = _norm(params, f"enc.{i}.norm2", x, counter)
            x = ad.add(x, _ffn_block(cfg, params, f"enc.{i}.ffn", xn, counter, dropout_rng))
        x = _norm(params, "enc.norm", x, counter)
    return EncoderOut(states=x, src_mask=src_mask)


def decoder_forward(cfg: ModelConfig, params: dict, tgt_in: np.ndarray,
                    enc: EncoderOut, causal: bool,
                    tgt_mask: np.ndarray | None = None,
                    counter: OpCounter | None = None,
                    dropout_rng: np.random.Generator | None = None):
    """Full decoder pass over all target positions; returns hidden states.

    causal=True applies the lower-triangular self-attention mask (teacher
    forcing / full-prefix recomputation); causal=False is the bidirectional
    pass used by the masked-prediction family.
    """
    tgt_in = np.asarray(tgt_in)
    b, lt = tgt_in.shape
    if lt > cfg.max_len + 1:
        raise ValueError(f"decoder input length {lt} exceeds max_len+1")
    if tgt_in.size and (tgt_in.min() < 0 or tgt_in.max() >= cfg.vocab_size):
        raise ValueError(f"decoder input token id outside vocab of {cfg.vocab_size}")
    if causal:
        self_mask = np.tril(np.ones((lt, lt), dtype=bool))[None, None]
    else:
        if tgt_mask is None:
            tgt_mask = tgt_in != PAD_ID
        self_mask = tgt_mask[:, None, None, :]
    cross_mask = enc.src_mask[:, None, None, :]

    with scoped(counter, "decoder"):
        table = _token_table(cfg, params, "dec")
        x = ad.mul(ad.embedding_lookup(table, tgt_in), math.sqrt(cfg.d_model))
        x = ad.add(x, _pos_slice(cfg, params, "dec", lt))
        x = ad.dropout(x, cfg.dropout, dropout_rng)
        for i in range(cfg.D):
            xn = _norm(params, f"dec.{i}.norm1", x, counter)
            a = multi_head_attention(xn, xn, xn, cfg.heads,
                                     _attn_params(params, f"dec.{i}.self"),
                                     mask=self_mask, counter=counter)
            x = ad.add(x, ad.dropout(a, cfg.dropout, dropout_rng))
            xn = _norm(params, f"dec.{i}.norm2", x, counter)
            a = multi_head_attention(xn, enc.states, enc.states, cfg.heads,
                                     _attn_params(params, f"dec.{i}.cross"),
                                     mask=cross_mask, counter=counter)
            x = ad.add(x, ad.dropout(a, cfg.dropout, dropout_rng))
            if cfg.decoder_ffn_enabled:
                xn = _norm(params, f"dec.{i}.norm3", x, counter)
                x = ad.add(x, _ffn_block(cfg, params, f"dec.{i}.ffn", xn, counter, dropout_rng))
        x = _norm(params, "dec.norm", x, counter)
    return x


def output_logits(cfg: ModelConfig, params: dict, hidden,
                  counter: OpCounter | None = None):
    """Vocabulary logits from decoder states (tied to embeddings by default)."""
    with scoped(counter, "logits"):
        if cfg.weight_tying:
            table = params["embed.token"]
            return ad.matmul(hidden, ad.transpose(table, (1, 0)), counter)
        return ad.matmul(hidden, params["out_proj.w"], counter)


def ar_logits(cfg: ModelConfig, params: dict, src_tokens, tgt_in,
              counter: OpCounter | None = None,
              dropout_rng: np.random.Generator | None = None,
              enc: EncoderOut | None = None):
    """Teacher-forced causal logits for every target position."""
    if cfg.decoder_mode != "causal":
        raise ValueError("ar_logits requires decoder_mode=causal")
    if enc is None:
        enc = encode(cfg, params, src_tokens, counter, dropout_rng)
    h = decoder_forward(cfg, params, tgt_in, enc, causal=True,
                        counter=counter, dropout_rng=dropout_rng)
    return output_logits(cfg, params, h, counter)


def decode_full_nar(cfg: ModelConfig, params: dict, tgt_tokens: np.ndarray,
                    enc: EncoderOut, counter: OpCounter | None = None,
                    dropout_rng: np.random.Generator | None = None,
                    tgt_mask: np.ndarray | None = None):
    """One bidirectional pass producing logits for all positions at once."""
    if cfg.decoder_mode != "bidirectional":
        raise ValueError("decode_full_nar requires decoder_mode=bidirectional")
    tgt_tokens = np.asarray(tgt_tokens)
    if tgt_tokens.size and tgt_tokens.max() >= cfg.vocab_size:
        raise ValueError("MASK or token id outside vocab")
    h = decoder_forward(cfg, params, tgt_tokens, enc, causal=False,
                        tgt_mask=tgt_mask, counter=counter, dropout_rng=dropout_rng)
    return output_logits(cfg, params, h, counter)


def disco_forward(cfg: ModelConfig, params: dict, tgt_tokens: np.ndarray,
                  allowed: np.ndarray, enc: EncoderOut,
                  counter: OpCounter | None = None,
                  dropout_rng: np.random.Generator | None = None,
                  tgt_mask: np.ndarray | None = None):
    """Bidirectional pass with per-position observed subsets.

    allowed[b, i, j] = True lets query position i see the token content at
    position j; everywhere else (including j == i, which is forced off) it
    sees a MASK embedding instead. Keys/values come from static per-layer
    projections of the two content streams, so no token identity leaks
    around the subset gating. The query stream starts from MASK+position
    embeddings and evolves through the layers.
    """
    if cfg.decoder_mode != "bidirectional":
        raise ValueError("disco_forward requires decoder_mode=bidirectional")
    tgt_tokens = np.asarray(tgt_tokens)
    b, lt = tgt_tokens.shape
    if tgt_mask is None:
        tgt_mask = tgt_tokens != PAD_ID
    eye = np.eye(lt, dtype=bool)[None]
    allowed = np.asarray(allowed, dtype=bool) & ~eye & tgt_mask[:, None, :]
    hidden_k = (~allowed) & tgt_mask[:, None, :]
    self_mask = np.concatenate([allowed, hidden_k], axis=-1)[:, None]   # [B,1,L,2L]
    cross_mask = enc.src_mask[:, None, None, :]
    scale = math.sqrt(cfg.d_model)

    with scoped(counter, "decoder"):
        table = _token_table(cfg, params, "dec")
        pos = _pos_slice(cfg, params, "dec", lt)
        e_tok = ad.add(ad.mul(ad.embedding_lookup(table, tgt_tokens), scale), pos)
        mask_ids = np.full((b, lt), MASK_ID)
        e_msk = ad.add(ad.mul(ad.embedding_lookup(table, mask_ids), scale), pos)
        x = ad.dropout(e_msk, cfg.dropout, dropout_rng)
        for i in range(cfg.D):
            ap = _attn_params(params, f"dec.{i}.self")
            xn = _norm(params, f"dec.{i}.norm1", x, counter)
            tok_n = _norm(params, f"dec.{i}.norm1", e_tok, counter)
            msk_n = _norm(params, f"dec.{i}.norm1", e_msk, counter)
            with scoped(counter, "attn_proj"):
                q = split_heads(ad.add(ad.matmul(xn, ap.wq, counter), ap.bq), cfg.heads)
                k_all = ad.concat([
                    split_heads(ad.matmul(tok_n, ap.wk, counter), cfg.heads),
                    split_heads(ad.matmul(msk_n, ap.wk, counter), cfg.heads),
                ], axis=-2)
                v_all = ad.concat([
                    split_heads(ad.add(ad.matmul(tok_n, ap.wv, counter), ap.bv), cfg.heads),
                    split_heads(ad.add(ad.matmul(msk_n, ap.wv, counter), ap.bv), cfg.heads),
                ], axis=-2)
            ctx = merge_heads(
                scaled_dot_attention(q, k_all, v_all, mask=self_mask, counter=counter))
            with scoped(counter, "attn_proj"):
                a = ad.add(ad.matmul(ctx, ap.wo, counter), ap.bo)
            x = ad.add(x, ad.dropout(a, cfg.dropout, dropout_rng))
            xn = _norm(params, f"dec.{i}.norm2", x, counter)
            a = multi_head_attention(xn, enc.states, enc.states, cfg.heads,
                                     _attn_params(params, f"dec.{i}.cross"),
                                     mask=cross_mask, counter=counter)
            x = ad.add(x, ad.dropout(a, cfg.dropout, dropout_rng))
            if cfg.decoder_ffn_enabled:
                xn = _norm(params, f"dec.{i}.norm3", x, counter)
                x = ad.add(x, _ffn_block(cfg, params, f"dec.{i}.ffn", xn, counter, dropout_rng))
        x = _norm(params, "dec.norm", x, counter)
    return output_logits(cfg, params, x, counter)


def length_logits(cfg: ModelConfig, params: dict, enc: EncoderOut,
                  counter: OpCounter | None = None):
    """Length-head logits over target lengths 1..max_len from pooled states."""
    if cfg.decoder_mode != "bidirectional":
        raise ValueError("length prediction requires decoder_mode=bidirectional")
    weights = enc.src_mask.astype(ad.value_of(enc.states).dtype)
    counts = weights.sum(axis=1, keepdims=True)
    pooled = ad.sum_reduce(ad.mul(enc.states, weights[:, :, None]), axis=1)
    pooled = ad.mul(pooled, 1.0 / counts)
    with scoped(counter, "length_head"):
        return ad.add(ad.matmul(pooled, params["len_head.w"], counter),
                      params["len_head.b"])


def predict_length(cfg: ModelConfig, params: dict, enc: EncoderOut,
                   counter: OpCounter | None = None) -> np.ndarray:
    """Distribution over target lengths 1..max_len, shape [B, max_len]."""
    logits = length_logits(cfg, params, enc, counter)
    return ad.softmax_lastdim(ad.value_of(logits))


def top_lengths(probs: np.ndarray, k: int, max_len: int) -> np.ndarray:
    """Top-k candidate lengths per row; ties broken toward shorter lengths."""
    b, n = probs.shape
    order = np.lexsort((np.broadcast_to(np.arange(n), (b, n)), -probs), axis=-1)
    lengths = order[:, :k] + 1
    return np.minimum(lengths, max_len)


# ---------------------------------------------------------------------------
# incremental (cached) causal decoding
# ---------------------------------------------------------------------------

@dataclass
class _LayerWeights:
    ln1_g: np.ndarray; ln1_b: np.ndarray
    wq: np.ndarray; bq: np.ndarray; wk: np.ndarray
    wv: np.ndarray; bv: np.ndarray; wo: np.ndarray; bo: np.ndarray
    ln2_g: np.ndarray; ln2_b: np.ndarray
    cwq: np.ndarray; cbq: np.ndarray; cwo: np.ndarray; cbo: np.ndarray
    ln3_g: np.ndarray | None; ln3_b: np.ndarray | None
    w1: np.ndarray | None; b1: np.ndarray | None
    w2: np.ndarray | None; b2: np.ndarray | None


@dataclass
class IncrementalState:
    """Per-layer cached decoder keys/values for one batch of decode streams.

    After t steps the self-attention cache holds exactly t positions.
    Cross-attention keys/values are projected once from the encoder output.
    """

    batch: int
    step: int
    self_k: list[np.ndarray]       # per layer [B, H, cap, dh]
    self_v: list[np.ndarray]
    cross_k: list[np.ndarray]      # per layer [B, H, Ls, dh]
    cross_v: list[np.ndarray]
    src_mask: np.ndarray           # [B, 1, Ls]
    layers: list[_LayerWeights]
    final_g: np.ndarray
    final_b: np.ndarray
    embed: np.ndarray              # [V, d] token table (decoder side)
    pos: np.ndarray                # [max_len+1, d]
    logits_w: np.ndarray           # [d, V]
    heads: int
    scale_emb: float
    scale_attn: float
    ffn_enabled: bool

    def reorder(self, idx: np.ndarray) -> None:
        """Permute/replicate the batch dimension (beam bookkeeping)."""
        self.self_k = [k[idx] for k in self.self_k]
        self.self_v = [v[idx] for v in self.self_v]
        self.cross_k = [k[idx] for k in self.cross_k]
        self.cross_v = [v[idx] for v in self.cross_v]
        self.src_mask = self.src_mask[idx]
        self.batch = len(idx)


def init_incremental_state(cfg: ModelConfig, params: dict, enc: EncoderOut,
                           max_steps: int | None = None,
                           counter: OpCounter | None = None) -> IncrementalState:
    if cfg.decoder_mode != "causal":
        raise ValueError("incremental decoding requires decoder_mode=causal")
    states = ad.value_of(enc.states)
    b, ls, d = states.shape
    h, dh = cfg.heads, cfg.head_dim
    cap = (max_steps if max_steps is not None else cfg.max_len) + 1
    dt = states.dtype

    def val(name):
        return ad.value_of(params[name])

    layers = []
    cross_k, cross_v = [], []
    flat = states.reshape(b * ls, d)
    for i in range(cfg.D):
        ffn_on = cfg.decoder_ffn_enabled
        lw = _LayerWeights(
            ln1_g=val(f"dec.{i}.norm1.gain"), ln1_b=val(f"dec.{i}.norm1.bias"),
            wq=val(f"dec.{i}.self.wq"), bq=val(f"dec.{i}.self.bq"),
            wk=val(f"dec.{i}.self.wk"),
            wv=val(f"dec.{i}.self.wv"), bv=val(f"dec.{i}.self.bv"),
            wo=val(f"dec.{i}.self.wo"), bo=val(f"dec.{i}.self.bo"),
            ln2_g=val(f"dec.{i}.norm2.gain"), ln2_b=val(f"dec.{i}.norm2.bias"),
            cwq=val(f"dec.{i}.cross.wq"), cbq=val(f"dec.{i}.cross.bq"),
            cwo=val(f"dec.{i}.cross.wo"), cbo=val(f"dec.{i}.cross.bo"),
            ln3_g=val(f"dec.{i}.norm3.gain") if ffn_on else None,
            ln3_b=val(f"dec.{i}.norm3.bias") if ffn_on else None,
            w1=val(f"dec.{i}.ffn.w1") if ffn_on else None,
            b1=val(f"dec.{i}.ffn.b1") if ffn_on else None,
            w2=val(f"dec.{i}.ffn.w2") if ffn_on else None,
            b2=val(f"dec.{i}.ffn.b2") if ffn_on else None,
        )
        layers.append(lw)
        ck = flat @ val(f"dec.{i}.cross.wk")
        cv = (flat @ val(f"dec.{i}.cross.wv") + val(f"dec.{i}.cross.bv"))
        if counter is not None:
            counter.add_macs_bucket("decoder.attn_proj", 2 * b * ls * d * d)
        cross_k.append(ck.reshape(b, ls, h, dh).transpose(0, 2, 1, 3).copy())
        cross_v.append(cv.reshape(b, ls, h, dh).transpose(0, 2, 1, 3).copy())

    if cfg.weight_tying:
        logits_w = np.ascontiguousarray(ad.value_of(params["embed.token"]).T)
        embed = ad.value_of(params["embed.token"])
    else:
        logits_w = ad.value_of(params["out_proj.w"])
        embed = ad.value_of(params["dec_embed.token"])
    if cfg.positions == "learned":
        pos = ad.value_of(params["dec.pos"])
    else:
        pos = sinusoid_table(cfg.max_len + 1, d, dt)

    return IncrementalState(
        batch=b, step=0,
        self_k=[np.zeros((b, h, cap, dh), dtype=dt) for _ in range(cfg.D)],
        self_v=[np.zeros((b, h, cap, dh), dtype=dt) for _ in range(cfg.D)],
        cross_k=cross_k, cross_v=cross_v,
        src_mask=enc.src_mask[:, None, :],
        layers=layers,
        final_g=val("dec.norm.gain"), final_b=val("dec.norm.bias"),
        embed=embed, pos=pos, logits_w=logits_w,
        heads=h, scale_emb=math.sqrt(d), scale_attn=1.0 / math.sqrt(dh),
        ffn_enabled=cfg.decoder_ffn_enabled,
    )


def _row_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float = 1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return (xc / np.sqrt(var + eps)) * g + b


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def decode_step_ar(cfg: ModelConfig, params: dict, prev_tokens: np.ndarray,
                   state: IncrementalState, enc: EncoderOut,
                   counter: OpCounter | None = None):
    """One cached decoder step: feed prev tokens, get next-token logits.

    Per-step cost is linear in the current prefix length; the cache is
    appended, never rebuilt. params is accepted for interface symmetry but
    the state already holds the resolved weight arrays.
    """
    prev_tokens = np.asarray(prev_tokens)
    b = prev_tokens.shape[0]
    if b != state.batch:
        raise ValueError(f"state batch {state.batch} != token batch {b}")
    t = state.step
    if t >= state.self_k[0].shape[2]:
        raise ValueError("incremental state capacity exhausted")
    h, dh = state.heads, state.self_k[0].shape[3]
    d = h * dh

    x = state.embed[prev_tokens] * state.scale_emb + state.pos[t]
    for li, lw in enumerate(state.layers):
        xn = _row_norm(x, lw.ln1_g, lw.ln1_b)
        q = (xn @ lw.wq + lw.bq).reshape(b, h, 1, dh)
        state.self_k[li][:, :, t, :] = (xn @ lw.wk).reshape(b, h, dh)
        state.self_v[li][:, :, t, :] = (xn @ lw.wv + lw.bv).reshape(b, h, dh)
        keys = state.self_k[li][:, :, :t + 1, :]
        vals = state.self_v[li][:, :, :t + 1, :]
        scores = (q @ keys.transpose(0, 1, 3, 2)) * state.scale_attn
        ctx = (_softmax_rows(scores) @ vals).reshape(b, d)
        x = x + (ctx @ lw.wo + lw.bo)

        xn = _row_norm(x, lw.ln2_g, lw.ln2_b)
        qc = (xn @ lw.cwq + lw.cbq).reshape(b, h, 1, dh)
        cscores = (qc @ state.cross_k[li].transpose(0, 1, 3, 2)) * state.scale_attn
        cscores = np.where(state.src_mask[:, :, None, :], cscores, -np.inf)
        cctx = (_softmax_rows(cscores) @ state.cross_v[li]).reshape(b, d)
        x = x + (cctx @ lw.cwo + lw.cbo)

        if state.ffn_enabled:
            xn = _row_norm(x, lw.ln3_g, lw.ln3_b)
            hmid = np.maximum(xn @ lw.w1 + lw.b1, 0.0)
            x = x + (hmid @ lw.w2 + lw.b2)

        if counter is not None:
            ls = state.cross_k[li].shape[2]
            counter.add_macs_bucket("decoder.attn_proj", b * d * d * 6)
            counter.add_macs_bucket("decoder.attn_scores",
                                    2 * b * d * (t + 1) + 2 * b * d * ls)
            if state.ffn_enabled:
                counter.add_macs_bucket("decoder.ffn", 2 * b * d * lw.w1.shape[1])

    x = _row_norm(x, state.final_g, state.final_b)
    logits = x @ state.logits_w
    if counter is not None:
        counter.add_macs_bucket("logits", b * d * state.logits_w.shape[1])
    state.step = t + 1
    return logits, state


# ---------------------------------------------------------------------------
# model handle + checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Model:
    config: ModelConfig
    params: dict[str, np.ndarray] = field(repr=False)

    @staticmethod
    def create(cfg: ModelConfig, seed: int = 0) -> "Model":
        return Model(config=cfg, params=init_params(cfg, seed))

    def encode(self, src_tokens, counter=None, dropout_rng=None):
        return encode(self.config, self.params, src_tokens, counter, dropout_rng)

    def decode_full_nar(self, tgt_tokens, enc, counter=None, tgt_mask=None):
        return decode_full_nar(self.config, self.params, tgt_tokens, enc,
                               counter, tgt_mask=tgt_mask)

    def disco_forward(self, tgt_tokens, allowed, enc, counter=None, tgt_mask=None):
        return disco_forward(self.config, self.params, tgt_tokens, allowed, enc,
                             counter, tgt_mask=tgt_mask)

    def predict_length(self, enc, counter=None):
        return predict_length(self.config, self.params, enc, counter)

    def init_incremental_state(self, enc, max_steps=None, counter=None):
        return init_incremental_state(self.config, self.params, enc, max_steps, counter)

    def decode_step_ar(self, prev_tokens, state, enc, counter=None):
        return decode_step_ar(self.config, self.params, prev_tokens, state, enc, counter)

    def output_logits(self, hidden, counter=None):
        return output_logits(self.config, self.params, hidden, counter)


def save_checkpoint(path, cfg: ModelConfig, params: dict[str, np.ndarray],
                    extra: dict | None = None) -> None:
    """Deterministic binary container: JSON header + raw array bytes.

    save -> load -> save produces identical bytes (names sorted, arrays
    stored little-endian C-order, no timestamps).
    """
    names = sorted(params)
    arrays = []
    for name in names:
        a = np.ascontiguousarray(ad.value_of(params[name]))
        if not np.isfinite(a).all():
            raise ValueError(f"checkpoint: non-finite values in {name}")
        arrays.append((name, a))
    header = {
        "format_version": 1,
        "config": cfg.to_dict(),
        "extra": extra or {},
        "arrays": [
            {"name": n, "dtype": str(a.dtype), "shape": list(a.shape)}
            for n, a in arrays
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes())


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    with Path(path).open("rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a seqbench checkpoint")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        params = {}
        for meta in header["arrays"]:
            dt = np.dtype(meta["dtype"]).newbyteorder("<")
            count = int(np.prod(meta["shape"])) if meta["shape"] else 1
            buf = fh.read(count * dt.itemsize)
            arr = np.frombuffer(buf, dtype=dt, count=count).reshape(meta["shape"])
            params[meta["name"]] = np.ascontiguousarray(arr).astype(np.dtype(meta["dtype"]))
    cfg = ModelConfig.from_dict(header["config"])
    return cfg, params, header.get("extra", {})
