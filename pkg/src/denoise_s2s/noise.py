"""Document corruption transforms and their seeded composition.

Five transforms: per-token masking, per-token deletion, span infilling
(variable-length spans collapsed to one [MASK]), sentence permutation, and
document rotation. All randomness flows through explicit numpy generators so
every corruption is a deterministic function of (input, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import MASK, Document

TRANSFORM_NAMES = (
    "token_mask",
    "token_delete",
    "text_infill",
    "sentence_permute",
    "document_rotate",
)

# Placement retries per infill span before giving up (degenerate docs only).
_MAX_PLACE_TRIES = 100


def new_rng(seed: int) -> np.random.Generator:
    """PCG64 stream; same seed gives the same stream on every platform."""
    return np.random.Generator(np.random.PCG64(seed))


def doc_rng(seed: int, doc_index: int) -> np.random.Generator:
    """Independent per-document stream, so corpus-level parallelism cannot
    change results."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, doc_index])))


@dataclass
class NoiseSpec:
    """Declarative corruption pipeline: which transforms, their rates, order."""

    mask_rate: float = 0.0
    delete_rate: float = 0.0
    infill_rate: float = 0.0
    poisson_lambda: float = 3.0
    permute_sentences: bool = False
    rotate_document: bool = False
    enabled: list[str] | None = None
    seed: int = 0

    def __post_init__(self):
        for name, rate in (
            ("mask_rate", self.mask_rate),
            ("delete_rate", self.delete_rate),
            ("infill_rate", self.infill_rate),
        ):
            if not 0.0 <= rate <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {rate}")
        if self.poisson_lambda <= 0:
            raise ValueError("poisson_lambda must be > 0")
        if self.enabled is None:
            self.enabled = self._default_order()
        unknown = [n for n in self.enabled if n not in TRANSFORM_NAMES]
        if unknown:
            raise ValueError(f"unknown transform name(s): {unknown}")
        if len(set(self.enabled)) != len(self.enabled):
            raise ValueError("enabled list contains duplicates")

    def _default_order(self) -> list[str]:
        order = []
        if self.mask_rate > 0:
            order.append("token_mask")
        if self.delete_rate > 0:
            order.append("token_delete")
        if self.infill_rate > 0:
            order.append("text_infill")
        if self.permute_sentences:
            order.append("sentence_permute")
        if self.rotate_document:
            order.append("document_rotate")
        return order


def _bounds_from_owners(owners: list[int]) -> list[tuple[int, int]]:
    """Rebuild contiguous sentence bounds from a non-decreasing owner index
    per token; sentences that lost all tokens disappear."""
    bounds: list[tuple[int, int]] = []
    start = 0
    for i in range(1, len(owners) + 1):
        if i == len(owners) or owners[i] != owners[i - 1]:
            bounds.append((start, i))
            start = i
    return bounds


def _owner_index(doc: Document) -> np.ndarray:
    owner = np.zeros(len(doc), dtype=np.int64)
    for si, (s, e) in enumerate(doc.sentence_bounds):
        owner[s:e] = si
    return owner


def token_mask(doc: Document, rate: float, rng: np.random.Generator) -> Document:
    """Replace each token independently with [MASK] with probability `rate`."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must be in [0, 1]")
    n = len(doc)
    hit = rng.random(n) < rate
    tokens = [MASK if hit[i] else t for i, t in enumerate(doc.tokens)]
    return Document(tokens=tokens, sentence_bounds=list(doc.sentence_bounds))


def token_delete(doc: Document, rate: float, rng: np.random.Generator) -> Document:
    """Drop each token independently with probability `rate`; order preserved."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must be in [0, 1]")
    n = len(doc)
    keep = rng.random(n) >= rate
    owner = _owner_index(doc)
    tokens = [t for i, t in enumerate(doc.tokens) if keep[i]]
    owners = [int(owner[i]) for i in range(n) if keep[i]]
    return Document(tokens=tokens, sentence_bounds=_bounds_from_owners(owners))


def sample_poisson(lam: float, rng: np.random.Generator) -> int:
    """Poisson draw by CDF inversion: smallest k with u <= P(X <= k)."""
    if lam <= 0:
        raise ValueError("lambda must be > 0")
    u = rng.random()
    p = math.exp(-lam)
    cdf = p
    k = 0
    while u > cdf and p > 0.0:
        k += 1
        p *= lam / k
        cdf += p
    return k


def text_infill(
    doc: Document, infill_rate: float, lam: float, rng: np.random.Generator
) -> Document:
    """Replace Poisson-length spans with a single [MASK] each until the
    replaced-token budget (infill_rate * len, rounded) is met.

    Zero-length spans insert a [MASK] at a uniform token gap. Spans never
    overlap, so the output [MASK] count equals the span count. The final span
    may overshoot the budget by up to its own length minus one.
    """
    if not 0.0 <= infill_rate < 1.0:
        raise ValueError("infill_rate must be in [0, 1)")
    n = len(doc)
    budget = int(round(infill_rate * n))
    if budget == 0 and infill_rate == 0.0:
        return Document(tokens=list(doc.tokens), sentence_bounds=list(doc.sentence_bounds))

    span_id = np.full(n, -1, dtype=np.int64)  # -1 = uncovered
    spans: list[tuple[int, int]] = []  # (start, length >= 1)
    inserts: list[int] = []  # gap positions for zero-length spans
    removed = 0
    while removed < budget:
        length = min(sample_poisson(lam, rng), n)
        if length == 0:
            for _ in range(_MAX_PLACE_TRIES):
                g = int(rng.integers(0, n + 1))
                inside = 0 < g < n and span_id[g - 1] != -1 and span_id[g - 1] == span_id[g]
                if not inside:
                    inserts.append(g)
                    break
            continue
        free = np.flatnonzero(span_id == -1)
        if len(free) == 0:
            break
        placed = False
        for _ in range(_MAX_PLACE_TRIES):
            s = int(rng.choice(free))
            if s + length <= n and (span_id[s : s + length] == -1).all():
                span_id[s : s + length] = len(spans)
                spans.append((s, length))
                removed += length
                placed = True
                break
        if not placed:
            break

    owner = _owner_index(doc)
    insert_counts: dict[int, int] = {}
    for g in inserts:
        insert_counts[g] = insert_counts.get(g, 0) + 1
    span_start = {s: length for s, length in spans}

    tokens: list[int] = []
    owners: list[int] = []

    def gap_owner(g: int) -> int:
        if n == 0:
            return 0
        return int(owner[min(g, n - 1)])

    i = 0
    while True:
        for _ in range(insert_counts.get(i, 0)):
            tokens.append(MASK)
            owners.append(gap_owner(i))
        if i >= n:
            break
        if i in span_start:
            tokens.append(MASK)
            owners.append(int(owner[i]))
            i += span_start[i]
        else:
            tokens.append(doc.tokens[i])
            owners.append(int(owner[i]))
            i += 1
    return Document(tokens=tokens, sentence_bounds=_bounds_from_owners(owners))


def sentence_permute(doc: Document, rng: np.random.Generator) -> Document:
    """Shuffle sentence order uniformly; each sentence stays intact."""
    k = len(doc.sentence_bounds)
    if k <= 1:
        return Document(tokens=list(doc.tokens), sentence_bounds=list(doc.sentence_bounds))
    perm = rng.permutation(k)
    tokens: list[int] = []
    bounds: list[tuple[int, int]] = []
    for j in perm:
        s, e = doc.sentence_bounds[j]
        bounds.append((len(tokens), len(tokens) + (e - s)))
        tokens.extend(doc.tokens[s:e])
    return Document(tokens=tokens, sentence_bounds=bounds)


def document_rotate(doc: Document, rng: np.random.Generator) -> Document:
    """Rotate so the document starts at a uniformly chosen token.

    The sentence containing the pivot is split in two; all other sentence
    boundaries rotate with their tokens.
    """
    n = len(doc)
    if n == 0:
        return Document(tokens=[], sentence_bounds=[])
    pivot = int(rng.integers(0, n))
    tokens = doc.tokens[pivot:] + doc.tokens[:pivot]
    if pivot == 0:
        return Document(tokens=tokens, sentence_bounds=list(doc.sentence_bounds))

    k = next(i for i, (s, e) in enumerate(doc.sentence_bounds) if s <= pivot < e)
    lengths: list[int] = []
    s_k, e_k = doc.sentence_bounds[k]
    lengths.append(e_k - pivot)
    for s, e in doc.sentence_bounds[k + 1 :]:
        lengths.append(e - s)
    for s, e in doc.sentence_bounds[:k]:
        lengths.append(e - s)
    if pivot > s_k:
        lengths.append(pivot - s_k)
    bounds = []
    pos = 0
    for length in lengths:
        if length > 0:
            bounds.append((pos, pos + length))
            pos += length
    return Document(tokens=tokens, sentence_bounds=bounds)


def apply(spec: NoiseSpec, doc: Document, rng: np.random.Generator | None = None) -> Document:
    """Run the enabled transforms in list order off one seeded stream."""
    if rng is None:
        rng = new_rng(spec.seed)
    out = doc
    for name in spec.enabled:
        if name == "token_mask":
            out = token_mask(out, spec.mask_rate, rng)
        elif name == "token_delete":
            out = token_delete(out, spec.delete_rate, rng)
        elif name == "text_infill":
            out = text_infill(out, spec.infill_rate, spec.poisson_lambda, rng)
        elif name == "sentence_permute":
            out = sentence_permute(out, rng)
        elif name == "document_rotate":
            out = document_rotate(out, rng)
        else:
            raise ValueError(f"unknown transform name: {name}")
    return out


def corrupt_corpus(spec: NoiseSpec, docs) -> list[Document]:
    """Corrupt every document with its own (seed, index)-derived stream."""
    return [apply(spec, d, rng=doc_rng(spec.seed, i)) for i, d in enumerate(docs)]
