"""Text ingestion: reversible whitespace tokenization, vocabulary building,
sentence segmentation on full stops.

The tokenizer is deliberately simple — whitespace split with '.' broken out
into its own token — so that corruption transforms and training objectives
operate on exact, reproducible token sequences.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

PAD, BOS, EOS, MASK, UNK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ["[PAD]", "[BOS]", "[EOS]", "[MASK]", "[UNK]"]
NUM_SPECIALS = len(SPECIAL_TOKENS)


@dataclass
class Vocab:
    """Bijective id<->token map with fixed special ids 0-4."""

    id_to_token: list[str]
    token_to_id: dict[str, int] = field(repr=False)

    pad_id: int = PAD
    bos_id: int = BOS
    eos_id: int = EOS
    mask_id: int = MASK
    unk_id: int = UNK

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def token(self, idx: int) -> str:
        if not 0 <= idx < self.size:
            raise ValueError(f"invalid token id: {idx}")
        return self.id_to_token[idx]

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, self.unk_id)


@dataclass
class Document:
    """Token-id sequence plus contiguous (start, end) sentence bounds."""

    tokens: list[int]
    sentence_bounds: list[tuple[int, int]]

    def __len__(self) -> int:
        return len(self.tokens)

    def sentences(self) -> list[list[int]]:
        return [self.tokens[s:e] for s, e in self.sentence_bounds]


def _split_units(text: str) -> list[str]:
    """Whitespace split, then break every '.' into its own unit."""
    units: list[str] = []
    for word in text.split():
        if "." not in word:
            units.append(word)
            continue
        for i, part in enumerate(word.split(".")):
            if part:
                units.append(part)
            if i < word.count("."):
                units.append(".")
    return units


def build_vocab(corpus, max_size: int) -> Vocab:
    """Frequency-ranked vocabulary over the corpus, specials at ids 0-4.

    Ties are broken lexicographically so the result is deterministic.
    """
    if max_size < NUM_SPECIALS + 1:
        raise ValueError(f"max_size must be >= {NUM_SPECIALS + 1}")
    corpus = list(corpus)
    if not corpus:
        raise ValueError("empty corpus")

    counts: Counter[str] = Counter()
    for text in corpus:
        counts.update(_split_units(text))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))

    id_to_token = list(SPECIAL_TOKENS)
    for token, _ in ranked[: max_size - NUM_SPECIALS]:
        id_to_token.append(token)
    token_to_id = {tok: i for i, tok in enumerate(id_to_token)}
    return Vocab(id_to_token=id_to_token, token_to_id=token_to_id)


def tokenize(text: str, vocab: Vocab) -> Document:
    """Map text to a Document; unknown words become [UNK].

    Sentences end after each '.' token; a trailing run without a '.' still
    forms a final sentence, so the bounds always cover the whole sequence.
    """
    units = _split_units(text)
    tokens = [vocab.id(u) for u in units]

    bounds: list[tuple[int, int]] = []
    start = 0
    for i, unit in enumerate(units):
        if unit == ".":
            bounds.append((start, i + 1))
            start = i + 1
    if start < len(tokens):
        bounds.append((start, len(tokens)))
    return Document(tokens=tokens, sentence_bounds=bounds)


def detokenize(tokens, vocab: Vocab) -> str:
    return " ".join(vocab.token(t) for t in tokens)


def load_corpus(path, vocab: Vocab) -> list[Document]:
    """One Document per non-empty line, in file order."""
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    return [tokenize(line, vocab) for line in lines if line.strip()]


def save_vocab(vocab: Vocab, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for token in vocab.id_to_token:
            f.write(token + "\n")


def load_vocab(path) -> Vocab:
    with open(path, encoding="utf-8") as f:
        id_to_token = f.read().splitlines()
    if id_to_token[:NUM_SPECIALS] != SPECIAL_TOKENS:
        raise ValueError(f"vocab file does not start with specials {SPECIAL_TOKENS}")
    return Vocab(id_to_token=id_to_token, token_to_id={t: i for i, t in enumerate(id_to_token)})
