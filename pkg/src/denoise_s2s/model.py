"""Encoder-decoder transformer: bidirectional encoder, causal decoder with
per-layer cross-attention over the final encoder hidden states, GeLU
activations, learned absolute positional embeddings, tied input/output
embeddings, and a two-stream forward pass for permuted-order prediction.

Attention masks are plain boolean matrices (allowed[i][j] = query i may
attend key j), so every objective's visibility pattern is just data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import MASK


@dataclass
class ModelConfig:
    enc_layers: int = 2
    dec_layers: int = 2
    hidden: int = 64
    heads: int = 2
    ffn: int = 256
    vocab_size: int = 64
    max_len: int = 64
    dropout: float = 0.1
    pre_norm: bool = False

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ValueError("hidden must be divisible by heads")
        if min(self.enc_layers, self.dec_layers, self.hidden, self.heads,
               self.ffn, self.vocab_size, self.max_len) < 1:
            raise ValueError("all size fields must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @classmethod
    def base(cls, vocab_size: int, max_len: int = 512) -> "ModelConfig":
        return cls(enc_layers=6, dec_layers=6, hidden=768, heads=12, ffn=3072,
                   vocab_size=vocab_size, max_len=max_len)

    @classmethod
    def large(cls, vocab_size: int, max_len: int = 1024) -> "ModelConfig":
        return cls(enc_layers=12, dec_layers=12, hidden=1024, heads=16, ffn=4096,
                   vocab_size=vocab_size, max_len=max_len)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

INIT_STD = 0.02


def _layer_paths(prefix: str, cfg: ModelConfig, cross: bool) -> list[tuple[str, tuple]]:
    d, f = cfg.hidden, cfg.ffn
    paths = []
    groups = ["attn"] + (["xattn"] if cross else [])
    for g in groups:
        for m in ("q", "k", "v", "o"):
            paths.append((f"{prefix}.{g}.{m}", (d, d)))
            paths.append((f"{prefix}.{g}.{m}_b", (d,)))
    ln_names = ["ln1"] + (["lnx"] if cross else []) + ["ln2"]
    for ln in ln_names:
        paths.append((f"{prefix}.{ln}.g", (d,)))
        paths.append((f"{prefix}.{ln}.b", (d,)))
    paths.append((f"{prefix}.ffn.w1", (d, f)))
    paths.append((f"{prefix}.ffn.b1", (f,)))
    paths.append((f"{prefix}.ffn.w2", (f, d)))
    paths.append((f"{prefix}.ffn.b2", (d,)))
    return paths


def param_paths(cfg: ModelConfig) -> list[tuple[str, tuple]]:
    """Canonical (path, shape) list; parameter order everywhere is the sorted
    path order derived from this."""
    d = cfg.hidden
    paths = [
        ("embed.tok", (cfg.vocab_size, d)),
        ("embed.pos_enc", (cfg.max_len, d)),
        ("embed.pos_dec", (cfg.max_len, d)),
    ]
    for i in range(cfg.enc_layers):
        paths.extend(_layer_paths(f"enc.{i}", cfg, cross=False))
    for i in range(cfg.dec_layers):
        paths.extend(_layer_paths(f"dec.{i}", cfg, cross=True))
    if cfg.pre_norm:
        for stack in ("enc", "dec"):
            paths.append((f"{stack}.final_ln.g", (d,)))
            paths.append((f"{stack}.final_ln.b", (d,)))
    return sorted(paths)


def init_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Weight matrices ~ N(0, 0.02^2); biases 0; layer-norm gains 1."""
    rng = np.random.Generator(np.random.PCG64(seed))
    params: dict[str, Tensor] = {}
    for path, shape in param_paths(cfg):
        if path.endswith(".g"):
            data = np.ones(shape)
        elif path.endswith(("_b", ".b", ".b1", ".b2")):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, INIT_STD, size=shape)
        params[path] = ad.param(data)
    return params


def count_params(params: dict[str, Tensor]) -> int:
    return sum(p.data.size for p in params.values())


def analytic_param_count(cfg: ModelConfig, cross_attention: bool = True) -> int:
    """Parameter count from shapes alone. With cross_attention=False this is
    the equivalently sized encoder-only stack (enc_layers + dec_layers plain
    self-attention layers sharing the same embeddings)."""
    d, f = cfg.hidden, cfg.ffn
    embed = cfg.vocab_size * d + 2 * cfg.max_len * d
    self_block = 4 * (d * d + d) + 2 * d
    ffn_block = d * f + f + f * d + d + 2 * d
    enc_layer = self_block + ffn_block
    dec_layer = enc_layer + (4 * (d * d + d) + 2 * d if cross_attention else 0)
    total = embed + cfg.enc_layers * enc_layer + cfg.dec_layers * dec_layer
    if cfg.pre_norm:
        total += 4 * d
    return total


# ---------------------------------------------------------------------------
# attention masks
# ---------------------------------------------------------------------------


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def full_mask(n_q: int, n_k: int) -> np.ndarray:
    return np.ones((n_q, n_k), dtype=bool)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def attention(q: Tensor, k: Tensor, v: Tensor, allowed: np.ndarray, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention; disallowed logits are -inf."""
    n_q, d = q.shape
    n_k = k.shape[0]
    if k.shape != (n_k, d) or v.shape != (n_k, d):
        raise ValueError("q/k/v widths must agree")
    if allowed.shape != (n_q, n_k):
        raise ValueError("mask shape must be (n_q, n_k)")
    if d % heads != 0:
        raise ValueError("width must be divisible by heads")
    if not allowed.any(axis=1).all():
        raise ValueError("query attends to nothing")

    dh = d // heads
    bias = np.where(allowed, 0.0, -np.inf)
    outs = []
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = ad.slice_cols(q, lo, hi)
        kh = ad.slice_cols(k, lo, hi)
        vh = ad.slice_cols(v, lo, hi)
        scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), 1.0 / np.sqrt(dh))
        probs = ad.softmax(ad.add_const(scores, bias), axis=-1)
        outs.append(ad.matmul(probs, vh))
    return ad.concat_cols(outs)


def _proj(x: Tensor, params, path: str) -> Tensor:
    return ad.add(ad.matmul(x, params[path]), params[path + "_b"])


def _maybe_dropout(x: Tensor, cfg: ModelConfig, mode: str, rng) -> Tensor:
    if mode == "train" and cfg.dropout > 0.0:
        if rng is None:
            raise ValueError("training mode requires an rng for dropout")
        return ad.dropout(x, cfg.dropout, rng)
    return x


def _attn_sublayer(x, kv, mask, params, prefix, cfg, mode, rng) -> Tensor:
    def body(inp):
        q = _proj(inp, params, f"{prefix}.q")
        k = _proj(kv, params, f"{prefix}.k")
        v = _proj(kv, params, f"{prefix}.v")
        out = attention(q, k, v, mask, cfg.heads)
        return _maybe_dropout(_proj(out, params, f"{prefix}.o"), cfg, mode, rng)

    return body(x)


def _ffn_sublayer(x, params, prefix, cfg, mode, rng) -> Tensor:
    h = ad.gelu(ad.add(ad.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    out = ad.add(ad.matmul(h, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])
    return _maybe_dropout(out, cfg, mode, rng)


def _ln(x, params, prefix) -> Tensor:
    return ad.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def _block(x, sublayer, params, ln_prefix, pre_norm) -> Tensor:
    # post-norm: LN(x + f(x)); pre-norm: x + f(LN(x))
    if pre_norm:
        return ad.add(x, sublayer(_ln(x, params, ln_prefix)))
    return _ln(ad.add(x, sublayer(x)), params, ln_prefix)


def _check_mode(mode: str):
    if mode not in ("train", "inference"):
        raise ValueError(f"mode must be 'train' or 'inference', got {mode!r}")


def _embed(tokens, params, pos_table: str) -> Tensor:
    n = len(tokens)
    tok = ad.embedding_lookup(params["embed.tok"], tokens)
    pos = ad.slice_rows(params[pos_table], 0, n)
    return ad.add(tok, pos)


def encoder_forward(tokens, params, cfg: ModelConfig, mode: str = "inference",
                    rng=None) -> Tensor:
    """Bidirectional self-attention stack; returns final hidden states."""
    _check_mode(mode)
    n = len(tokens)
    if n == 0:
        raise ValueError("empty encoder input")
    if n > cfg.max_len:
        raise ValueError(f"input length {n} exceeds max_len {cfg.max_len}")
    x = _embed(tokens, params, "embed.pos_enc")
    mask = full_mask(n, n)
    for i in range(cfg.enc_layers):
        p = f"enc.{i}"
        x = _block(x, lambda t: _attn_sublayer(t, t, mask, params, f"{p}.attn", cfg, mode, rng),
                   params, f"{p}.ln1", cfg.pre_norm)
        x = _block(x, lambda t: _ffn_sublayer(t, params, f"{p}.ffn", cfg, mode, rng),
                   params, f"{p}.ln2", cfg.pre_norm)
    if cfg.pre_norm:
        x = _ln(x, params, "enc.final_ln")
    return x


def _decoder_stack(x: Tensor, enc_hidden, params, cfg: ModelConfig,
                   self_mask: np.ndarray, mode: str, rng) -> Tensor:
    n = x.shape[0]
    if enc_hidden is not None and enc_hidden.shape[0] == 0:
        raise ValueError("zero-length encoder output")
    if self_mask.shape != (n, n):
        raise ValueError("self_mask shape must match decoder length")
    cross = None if enc_hidden is None else full_mask(n, enc_hidden.shape[0])
    for i in range(cfg.dec_layers):
        p = f"dec.{i}"
        x = _block(x, lambda t: _attn_sublayer(t, t, self_mask, params, f"{p}.attn", cfg, mode, rng),
                   params, f"{p}.ln1", cfg.pre_norm)
        if enc_hidden is not None:
            x = _block(x, lambda t: _attn_sublayer(t, enc_hidden, cross, params, f"{p}.xattn",
                                                   cfg, mode, rng),
                       params, f"{p}.lnx", cfg.pre_norm)
        x = _block(x, lambda t: _ffn_sublayer(t, params, f"{p}.ffn", cfg, mode, rng),
                   params, f"{p}.ln2", cfg.pre_norm)
    if cfg.pre_norm:
        x = _ln(x, params, "dec.final_ln")
    return x


def output_logits(hidden: Tensor, params) -> Tensor:
    """Project onto the vocabulary through the tied token embedding."""
    return ad.matmul(hidden, ad.transpose(params["embed.tok"]))


def decoder_hidden(tokens, enc_hidden, params, cfg: ModelConfig,
                   self_mask: np.ndarray | None = None, mode: str = "inference",
                   rng=None) -> Tensor:
    """Decoder stack output before the vocabulary projection.

    enc_hidden=None drops the cross-attention sublayer entirely (pure
    language-model stack); a zero-length encoder output is an error.
    """
    _check_mode(mode)
    n = len(tokens)
    if n == 0:
        raise ValueError("empty decoder input")
    if n > cfg.max_len:
        raise ValueError(f"input length {n} exceeds max_len {cfg.max_len}")
    if self_mask is None:
        self_mask = causal_mask(n)
    x = _embed(tokens, params, "embed.pos_dec")
    return _decoder_stack(x, enc_hidden, params, cfg, self_mask, mode, rng)


def decoder_forward(tokens, enc_hidden, params, cfg: ModelConfig,
                    self_mask: np.ndarray | None = None, mode: str = "inference",
                    rng=None) -> Tensor:
    return output_logits(decoder_hidden(tokens, enc_hidden, params, cfg,
                                        self_mask, mode, rng), params)


# ---------------------------------------------------------------------------
# two-stream forward
# ---------------------------------------------------------------------------


def rank_vector(n: int, predict_positions) -> np.ndarray:
    """rank[p] = generation-order index for predicted positions, -1 elsewhere."""
    rank = np.full(n, -1, dtype=np.int64)
    for t, p in enumerate(predict_positions):
        if not 0 <= p < n:
            raise ValueError(f"predict position {p} out of range")
        if rank[p] != -1:
            raise ValueError("duplicate predict positions")
        rank[p] = t
    return rank


def content_stream_mask(rank: np.ndarray) -> np.ndarray:
    """allowed[i][j] <=> rank[j] <= rank[i]; context tokens have rank -1, so
    they see each other and everyone sees them."""
    return rank[None, :] <= rank[:, None]


def two_stream_forward(tokens, predict_positions, params, cfg: ModelConfig,
                       mode: str = "inference", rng=None) -> Tensor:
    """Predict each listed position in the given order without revealing its
    own content, in a single pass.

    Realized by appending one query row per predicted position: the query row
    for order index t holds the [MASK] embedding at that position's slot and
    attends to context tokens, the content of earlier predicted positions,
    and itself. Content rows follow the rank mask and never see query rows.
    Returns logits with one row per predicted position, in order.
    """
    _check_mode(mode)
    n = len(tokens)
    m = len(predict_positions)
    if m == 0:
        return Tensor(np.zeros((0, cfg.vocab_size)))
    if n > cfg.max_len:
        raise ValueError(f"input length {n} exceeds max_len {cfg.max_len}")
    rank = rank_vector(n, predict_positions)

    content = _embed(tokens, params, "embed.pos_dec")
    q_tok = ad.embedding_lookup(params["embed.tok"], [MASK] * m)
    q_pos = ad.embedding_lookup(params["embed.pos_dec"], list(predict_positions))
    x = ad.concat_rows([content, ad.add(q_tok, q_pos)])

    allowed = np.zeros((n + m, n + m), dtype=bool)
    allowed[:n, :n] = content_stream_mask(rank)
    order = np.arange(m)
    allowed[n:, :n] = rank[None, :] < order[:, None]
    allowed[n:, n:] = np.eye(m, dtype=bool)

    h = _decoder_stack(x, None, params, cfg, allowed, mode, rng)
    return output_logits(ad.slice_rows(h, n, n + m), params)
