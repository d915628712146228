"""Turns documents into supervised batches: the denoising objective plus the
five comparison objectives (LM, permuted LM, masked LM, multitask masked LM,
masked seq2seq), each in sequence-to-sequence or prefix framing.

A Batch is self-describing: encoder tokens (possibly empty for decoder-only
objectives), decoder tokens, targets aligned with the decoder, a 0/1 loss
mask, and the decoder self-attention mask that realizes the objective's
visibility pattern.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import BOS, EOS, MASK, PAD, Document
from .model import causal_mask, content_stream_mask, full_mask, rank_vector
from .noise import NoiseSpec, apply

MLM_MASK_RATE = 0.15
PERMUTE_FRACTION = 6  # predict 1 in 6 tokens
SEQ2SEQ_SPAN_FRACTION = 0.5

OBJECTIVE_KINDS = ("denoise", "lm", "permuted_lm", "masked_lm", "multitask_mlm",
                   "masked_seq2seq")

# multitask masked LM self-attention mask ensemble
MULTITASK_PATTERNS = ("l2r", "r2l", "full", "half_prefix")
MULTITASK_PROBS = (1 / 6, 1 / 6, 1 / 3, 1 / 3)


@dataclass
class Batch:
    enc_tokens: list[int]
    dec_tokens: list[int]
    targets: list[int]
    loss_mask: list[int]
    dec_self_mask: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.dec_tokens)
        if len(self.targets) != n or len(self.loss_mask) != n:
            raise ValueError("targets/loss_mask must align with dec_tokens")
        if sum(self.loss_mask) < 1:
            raise ValueError("batch has no supervised positions")


@dataclass
class ObjectiveSpec:
    kind: str
    framing: str = "seq2seq"
    noise: NoiseSpec | None = None

    def __post_init__(self):
        if self.kind not in OBJECTIVE_KINDS:
            raise ValueError(f"unknown objective kind: {self.kind}")
        if self.framing not in ("seq2seq", "prefix"):
            raise ValueError(f"unknown framing: {self.framing}")
        if self.kind == "denoise" and self.noise is None:
            raise ValueError("denoise objective requires a NoiseSpec")
        if self.framing == "prefix" and self.kind not in ("denoise", "masked_seq2seq"):
            raise ValueError(f"prefix framing does not apply to {self.kind}")


def build_denoise(doc: Document, spec: NoiseSpec, rng: np.random.Generator) -> Batch:
    """Corrupted document in, original document out. When corruption removes
    everything the encoder side is empty and the batch degrades to a pure
    language model, which is the correct limit."""
    if len(doc) == 0:
        raise ValueError("empty document")
    corrupted = apply(spec, doc, rng=rng)
    dec = [BOS] + list(doc.tokens)
    return Batch(
        enc_tokens=list(corrupted.tokens),
        dec_tokens=dec,
        targets=list(doc.tokens) + [EOS],
        loss_mask=[1] * len(dec),
        dec_self_mask=causal_mask(len(dec)),
        meta={"objective": "denoise", "framing": "seq2seq"},
    )


def build_lm(doc: Document) -> Batch:
    if len(doc) == 0:
        raise ValueError("empty document")
    dec = [BOS] + list(doc.tokens)
    return Batch(
        enc_tokens=[],
        dec_tokens=dec,
        targets=list(doc.tokens) + [EOS],
        loss_mask=[1] * len(dec),
        dec_self_mask=causal_mask(len(dec)),
        meta={"objective": "lm", "framing": "seq2seq"},
    )


def build_permuted_lm(doc: Document, rng: np.random.Generator) -> Batch:
    """Sample 1/6 of positions and predict them autoregressively in a random
    order; everything else is visible context. The batch carries the content
    stream mask and meta['predict_order'] drives the two-stream forward."""
    n = len(doc)
    if n == 0:
        raise ValueError("empty document")
    n_pred = max(1, math.ceil(n / PERMUTE_FRACTION)) if n >= PERMUTE_FRACTION else 1
    chosen = rng.choice(n, size=n_pred, replace=False)
    order = [int(p) for p in chosen[rng.permutation(n_pred)]]
    loss_mask = [0] * n
    for p in order:
        loss_mask[p] = 1
    return Batch(
        enc_tokens=[],
        dec_tokens=list(doc.tokens),
        targets=list(doc.tokens),
        loss_mask=loss_mask,
        dec_self_mask=content_stream_mask(rank_vector(n, order)),
        meta={"objective": "permuted_lm", "framing": "seq2seq", "predict_order": order},
    )


def _mask_positions(n: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    hit = rng.random(n) < rate
    if not hit.any():
        hit[int(rng.integers(0, n))] = True  # every batch must supervise something
    return hit


def build_masked_lm(doc: Document, rng: np.random.Generator) -> Batch:
    """15% of positions replaced by [MASK] in the input; each is predicted
    from its own row under full bidirectional attention, so predictions are
    conditionally independent."""
    n = len(doc)
    if n == 0:
        raise ValueError("empty document")
    hit = _mask_positions(n, MLM_MASK_RATE, rng)
    dec = [MASK if hit[i] else t for i, t in enumerate(doc.tokens)]
    return Batch(
        enc_tokens=[],
        dec_tokens=dec,
        targets=list(doc.tokens),
        loss_mask=[int(h) for h in hit],
        dec_self_mask=full_mask(n, n),
        meta={"objective": "masked_lm", "framing": "seq2seq"},
    )


def multitask_pattern_mask(pattern: str, n: int) -> np.ndarray:
    if pattern == "l2r":
        return causal_mask(n)
    if pattern == "r2l":
        return np.triu(np.ones((n, n), dtype=bool))
    if pattern == "full":
        return full_mask(n, n)
    if pattern == "half_prefix":
        h = math.ceil(n / 2)
        allowed = np.zeros((n, n), dtype=bool)
        allowed[:h, :h] = True
        for i in range(h, n):
            allowed[i, : i + 1] = True
        return allowed
    raise ValueError(f"unknown pattern: {pattern}")


def build_multitask_mlm(doc: Document, rng: np.random.Generator) -> Batch:
    """Masked LM with a self-attention mask drawn per document from the
    (1/6, 1/6, 1/3, 1/3) ensemble over left-to-right, right-to-left,
    unrestricted, and half-prefix patterns."""
    n = len(doc)
    if n == 0:
        raise ValueError("empty document")
    pattern = MULTITASK_PATTERNS[int(rng.choice(len(MULTITASK_PATTERNS), p=MULTITASK_PROBS))]
    hit = _mask_positions(n, MLM_MASK_RATE, rng)
    dec = [MASK if hit[i] else t for i, t in enumerate(doc.tokens)]
    return Batch(
        enc_tokens=[],
        dec_tokens=dec,
        targets=list(doc.tokens),
        loss_mask=[int(h) for h in hit],
        dec_self_mask=multitask_pattern_mask(pattern, n),
        meta={"objective": "multitask_mlm", "framing": "seq2seq", "pattern": pattern},
    )


def build_masked_seq2seq(doc: Document, rng: np.random.Generator) -> Batch:
    """One contiguous span covering half the document is masked per position
    on the encoder side (length preserved); the decoder predicts the span."""
    n = len(doc)
    if n < 2:
        raise ValueError("document must have at least 2 tokens")
    span_len = math.ceil(n * SEQ2SEQ_SPAN_FRACTION)
    start = int(rng.integers(0, n - span_len + 1))
    span = list(doc.tokens[start : start + span_len])
    enc = list(doc.tokens)
    enc[start : start + span_len] = [MASK] * span_len
    dec = [BOS] + span
    return Batch(
        enc_tokens=enc,
        dec_tokens=dec,
        targets=span + [EOS],
        loss_mask=[1] * len(dec),
        dec_self_mask=causal_mask(len(dec)),
        meta={"objective": "masked_seq2seq", "framing": "seq2seq", "span": (start, start + span_len)},
    )


def to_prefix(batch: Batch) -> Batch:
    """Move the source into the decoder as a bidirectional prefix (separated
    by EOS); loss stays on the target part only."""
    if batch.meta.get("framing") == "prefix":
        raise ValueError("batch is already prefix-framed")
    if not batch.enc_tokens:
        raise ValueError("prefix framing requires a non-empty source")
    src = list(batch.enc_tokens)
    p = len(src) + 1  # prefix includes the separator
    n = p + len(batch.dec_tokens)
    allowed = np.zeros((n, n), dtype=bool)
    allowed[:p, :p] = True
    for i in range(p, n):
        allowed[i, : i + 1] = True
    meta = dict(batch.meta)
    meta["framing"] = "prefix"
    return Batch(
        enc_tokens=[],
        dec_tokens=src + [EOS] + list(batch.dec_tokens),
        targets=[PAD] * p + list(batch.targets),
        loss_mask=[0] * p + list(batch.loss_mask),
        dec_self_mask=allowed,
        meta=meta,
    )


def build_batch(doc: Document, spec: ObjectiveSpec, rng: np.random.Generator) -> Batch:
    if spec.kind == "denoise":
        batch = build_denoise(doc, spec.noise, rng)
    elif spec.kind == "lm":
        batch = build_lm(doc)
    elif spec.kind == "permuted_lm":
        batch = build_permuted_lm(doc, rng)
    elif spec.kind == "masked_lm":
        batch = build_masked_lm(doc, rng)
    elif spec.kind == "multitask_mlm":
        batch = build_multitask_mlm(doc, rng)
    elif spec.kind == "masked_seq2seq":
        batch = build_masked_seq2seq(doc, rng)
    else:  # unreachable; ObjectiveSpec validates
        raise ValueError(spec.kind)
    if spec.framing == "prefix":
        batch = to_prefix(batch)
    return batch
